//! One-hidden-layer ReLU classifier with analytic gradients.
//!
//! Parameters are exposed as four flat tensors in a fixed order
//! (`W1`, `b1`, `W2`, `b2`, matrices row-major); that order is also the layer
//! order used by the per-layer optimizer.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::ParamVector;

pub const DEFAULT_HIDDEN: usize = 784;
pub const LAYER_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFAO";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpShape {
    pub fn layer_dims(&self) -> [usize; 4] {
        [
            self.in_dim * self.hidden,
            self.hidden,
            self.hidden * self.classes,
            self.classes,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().sum()
    }
}

/// Labelled samples, one per row of `inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: inputs.nrows(),
                found: labels.len(),
            });
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    pub fn zeros(shape: MlpShape) -> Self {
        Mlp {
            w1: Array2::zeros((shape.in_dim, shape.hidden)),
            b1: Array1::zeros(shape.hidden),
            w2: Array2::zeros((shape.hidden, shape.classes)),
            b2: Array1::zeros(shape.classes),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Self {
        let mut m = Mlp::zeros(shape);
        let mut fill = |w: &mut Array2<f64>, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        fill(&mut m.w1, shape.in_dim, shape.hidden);
        fill(&mut m.w2, shape.hidden, shape.classes);
        m
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape {
            in_dim: self.w1.nrows(),
            hidden: self.w1.ncols(),
            classes: self.w2.ncols(),
        }
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (_, logits) = self.forward_cached(inputs)?;
        Ok(logits)
    }

    fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if inputs.ncols() != self.w1.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.w1.nrows(),
                found: inputs.ncols(),
            });
        }
        let mut pre = inputs.dot(&self.w1);
        pre += &self.b1;
        let hidden = pre.mapv(|z| z.max(0.0));
        let mut logits = hidden.dot(&self.w2);
        logits += &self.b2;
        Ok((pre, logits))
    }

    pub fn loss_and_grads(&self, batch: &Dataset) -> Result<(f64, Vec<ParamVector>)> {
        self.loss_and_grads_masked(batch, None)
    }

    /// Mean softmax cross-entropy and its gradient per tensor. With `active`
    /// set, the softmax runs over those classes only and the others get no
    /// gradient.
    pub fn loss_and_grads_masked(
        &self,
        batch: &Dataset,
        active: Option<&[usize]>,
    ) -> Result<(f64, Vec<ParamVector>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes = self.w2.ncols();
        let mask = class_mask(classes, active)?;
        let (pre, logits) = self.forward_cached(batch.inputs.view())?;
        let n = batch.len() as f64;

        let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for (i, (row, &label)) in logits.outer_iter().zip(&batch.labels).enumerate() {
            if label >= classes || !mask[label] {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let probs = masked_softmax(row.as_slice().expect("row-major logits"), &mask);
            loss += nll(probs[label]);
            let mut drow = dlogits.row_mut(i);
            for c in 0..classes {
                let target = if c == label { 1.0 } else { 0.0 };
                if mask[c] {
                    drow[c] = (probs[c] - target) / n;
                }
            }
        }
        loss /= n;

        let hidden = pre.mapv(|z| z.max(0.0));
        let dw2 = hidden.t().dot(&dlogits);
        let db2 = dlogits.sum_axis(Axis(0));
        let mut dpre = dlogits.dot(&self.w2.t());
        dpre.zip_mut_with(&pre, |d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        let dw1 = batch.inputs.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));

        let grads = vec![flat2(dw1), flat1(db1), flat2(dw2), flat1(db2)];
        Ok((loss, grads))
    }

    pub fn loss(&self, batch: &Dataset, active: Option<&[usize]>) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes = self.w2.ncols();
        let mask = class_mask(classes, active)?;
        let logits = self.forward(batch.inputs.view())?;
        let mut loss = 0.0;
        for (row, &label) in logits.outer_iter().zip(&batch.labels) {
            if label >= classes || !mask[label] {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let probs = masked_softmax(row.as_slice().expect("row-major logits"), &mask);
            loss += nll(probs[label]);
        }
        Ok(loss / batch.len() as f64)
    }

    /// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let logits = self.forward(data.inputs.view())?;
        let correct = logits
            .outer_iter()
            .zip(&data.labels)
            .filter(|(row, &label)| argmax(row.as_slice().expect("row-major logits")) == label)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn layers(&self) -> Vec<ParamVector> {
        vec![
            flat2(self.w1.clone()),
            flat1(self.b1.clone()),
            flat2(self.w2.clone()),
            flat1(self.b2.clone()),
        ]
    }

    pub fn set_layers(&mut self, layers: &[ParamVector]) -> Result<()> {
        let dims = self.shape().layer_dims();
        if layers.len() != dims.len() {
            return Err(Error::LengthMismatch {
                what: "layers",
                expected: dims.len(),
                found: layers.len(),
            });
        }
        for (i, (l, &d)) in layers.iter().zip(&dims).enumerate() {
            l.check_dim(d).map_err(|e| e.in_layer(i))?;
        }
        fill_from(self.w1.as_slice_mut().expect("standard layout"), &layers[0]);
        fill_from(self.b1.as_slice_mut().expect("standard layout"), &layers[1]);
        fill_from(self.w2.as_slice_mut().expect("standard layout"), &layers[2]);
        fill_from(self.b2.as_slice_mut().expect("standard layout"), &layers[3]);
        Ok(())
    }

    /// Writes `"SFAO"`, a `u32` version, the tensor count, then for each tensor
    /// its rank, its `u64` dims and an `f32` payload. All integers little-endian.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let shape = self.shape();
        let tensors: [(&[usize], &[f64]); 4] = [
            (
                &[shape.in_dim, shape.hidden],
                self.w1.as_slice().expect("standard layout"),
            ),
            (
                &[shape.hidden],
                self.b1.as_slice().expect("standard layout"),
            ),
            (
                &[shape.hidden, shape.classes],
                self.w2.as_slice().expect("standard layout"),
            ),
            (
                &[shape.classes],
                self.b2.as_slice().expect("standard layout"),
            ),
        ];
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (dims, data) in tensors {
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for &d in dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in data {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(*CHECKPOINT_MAGIC),
                found: u32::from_be_bytes(magic),
            });
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = read_u32(&mut r)?;
        if count != 4 {
            return Err(Error::LengthMismatch {
                what: "checkpoint tensors",
                expected: 4,
                found: count as usize,
            });
        }
        let mut tensors = Vec::with_capacity(4);
        for _ in 0..4 {
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 2 {
                return Err(Error::DimOverflow);
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::DimOverflow)?);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(Error::DimOverflow)?;
            let mut payload = vec![0u8; len.checked_mul(4).ok_or(Error::DimOverflow)?];
            read_exact(&mut r, &mut payload)?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((dims, data));
        }
        let (d_w1, d_w2) = (&tensors[0].0, &tensors[2].0);
        if d_w1.len() != 2 || d_w2.len() != 2 {
            return Err(Error::DimOverflow);
        }
        let shape = MlpShape {
            in_dim: d_w1[0],
            hidden: d_w1[1],
            classes: d_w2[1],
        };
        let mut m = Mlp::zeros(shape);
        let layers: Vec<ParamVector> = tensors
            .into_iter()
            .map(|(_, d)| ParamVector::new(d))
            .collect();
        m.set_layers(&layers)?;
        Ok(m)
    }
}

fn class_mask(classes: usize, active: Option<&[usize]>) -> Result<Vec<bool>> {
    match active {
        None => Ok(vec![true; classes]),
        Some(active) => {
            let mut mask = vec![false; classes];
            for &c in active {
                if c >= classes {
                    return Err(Error::LabelOutOfRange { label: c, classes });
                }
                mask[c] = true;
            }
            Ok(mask)
        }
    }
}

/// Softmax over the unmasked entries (log-sum-exp with max subtraction);
/// masked entries get probability zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

// NaN must survive so a diverged model is detected.
fn nll(p: f64) -> f64 {
    if p.is_nan() {
        return p;
    }
    -p.max(f64::MIN_POSITIVE).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    masked_softmax(logits, &vec![true; logits.len()])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn flat2(a: Array2<f64>) -> ParamVector {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    ParamVector::new(a.into_raw_vec_and_offset().0)
}

fn flat1(a: Array1<f64>) -> ParamVector {
    ParamVector::new(a.to_vec())
}

fn fill_from(dst: &mut [f64], src: &[f64]) {
    dst.copy_from_slice(src);
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile {
                expected: buf.len(),
                found: 0,
            }
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(w1: f64, w2: f64, b2: f64) -> Mlp {
        Mlp {
            w1: array![[w1]],
            b1: array![0.0],
            w2: array![[w2]],
            b2: array![b2],
        }
    }

    #[test]
    fn forward_examples() {
        let shape = MlpShape {
            in_dim: 3,
            hidden: 4,
            classes: 2,
        };
        let logits = Mlp::zeros(shape)
            .forward(array![[0.1, 0.2, 0.3]].view())
            .unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        assert_eq!(softmax(logits.row(0).as_slice().unwrap()), vec![0.5, 0.5]);

        let net = scalar_net(1.0, 1.0, 0.0);
        assert_eq!(net.forward(array![[2.0]].view()).unwrap()[[0, 0]], 2.0);
        let net = scalar_net(1.0, 1.0, 0.25);
        assert_eq!(net.forward(array![[-1.0]].view()).unwrap()[[0, 0]], 0.25);

        assert!(matches!(
            net.forward(array![[1.0, 2.0]].view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn uniform_loss_is_ln_classes() {
        let shape = MlpShape {
            in_dim: 3,
            hidden: 4,
            classes: 2,
        };
        let batch = Dataset::new(array![[0.1, 0.2, 0.3], [0.9, 0.0, 0.5]], vec![0, 1]).unwrap();
        let (loss, _) = Mlp::zeros(shape).loss_and_grads(&batch).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_prediction_has_no_loss() {
        let net = scalar_net(1.0, 1.0, 0.0);
        let mut net2 = Mlp::zeros(MlpShape {
            in_dim: 1,
            hidden: 1,
            classes: 2,
        });
        net2.w1[[0, 0]] = 1.0;
        net2.w2[[0, 0]] = 1000.0;
        let batch = Dataset::new(array![[1.0]], vec![0]).unwrap();
        let (loss, grads) = net2.loss_and_grads(&batch).unwrap();
        assert!(loss < 1e-12);
        assert!(grads.iter().all(|g| g.iter().all(|x| x.abs() < 1e-12)));
        assert_eq!(net.shape().num_params(), 4);
    }

    #[test]
    fn masked_loss_ignores_inactive_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::init(
            MlpShape {
                in_dim: 3,
                hidden: 5,
                classes: 4,
            },
            &mut rng,
        );
        let batch = Dataset::new(array![[0.1, 0.2, 0.3], [0.9, 0.0, 0.5]], vec![2, 3]).unwrap();
        let (_, grads) = net.loss_and_grads_masked(&batch, Some(&[2, 3])).unwrap();
        // b2 and W2 columns of classes 0 and 1 receive nothing
        assert_eq!(grads[3][0], 0.0);
        assert_eq!(grads[3][1], 0.0);
        assert!((grads[3][2] + grads[3][3]).abs() < 1e-15);
        assert!(net.loss_and_grads_masked(&batch, Some(&[0, 1])).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let net = scalar_net(1.0, 1.0, 0.0);
        let mut two = Mlp::zeros(MlpShape {
            in_dim: 1,
            hidden: 1,
            classes: 2,
        });
        two.w1[[0, 0]] = 1.0;
        two.w2[[0, 1]] = 1.0;
        // positive input -> class 1, non-positive -> tie -> class 0
        let data = Dataset::new(array![[1.0], [-1.0]], vec![1, 0]).unwrap();
        assert_eq!(two.evaluate(&data).unwrap(), 1.0);

        let zero = Mlp::zeros(MlpShape {
            in_dim: 1,
            hidden: 2,
            classes: 2,
        });
        let balanced = Dataset::new(array![[0.1], [0.2], [0.3], [0.4]], vec![0, 1, 0, 1]).unwrap();
        assert_eq!(zero.evaluate(&balanced).unwrap(), 0.5);

        let wrong = Dataset::new(array![[1.0]], vec![0]).unwrap();
        assert_eq!(two.evaluate(&wrong).unwrap(), 0.0);

        let empty = Dataset::new(Array2::zeros((0, 1)), vec![]).unwrap();
        assert!(matches!(net.evaluate(&empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::init(
            MlpShape {
                in_dim: 4,
                hidden: 3,
                classes: 2,
            },
            &mut rng,
        );
        let mut other = Mlp::zeros(net.shape());
        other.set_layers(&net.layers()).unwrap();
        assert_eq!(other, net);
        assert_eq!(net.layers()[0][1], net.w1[[0, 1]]);
        assert!(other.set_layers(&net.layers()[..3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::init(
            MlpShape {
                in_dim: 4,
                hidden: 3,
                classes: 2,
            },
            &mut rng,
        );
        let mut bytes = Vec::new();
        net.save(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SFAO");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let loaded = Mlp::load(bytes.as_slice()).unwrap();
        assert_eq!(loaded.shape(), net.shape());
        for (a, b) in loaded.layers().iter().zip(net.layers()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Mlp::load(bad.as_slice()),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Mlp::load(bad.as_slice()),
            Err(Error::UnsupportedVersion(9))
        ));
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(
            Mlp::load(bytes.as_slice()),
            Err(Error::TruncatedFile { .. })
        ));
    }
}
