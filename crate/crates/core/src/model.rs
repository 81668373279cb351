//! Compact convolutional classifiers with optional non-local attention
//! blocks, plus the training and scoring loops shared by the surrogate,
//! auxiliary and victim models.

use armor_tensor::{par, Real, Sgd, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::{ArmorError, Result};

/// A classifier whose forward pass can be recorded on a tape in any
/// [`Real`] precision. Parameters are stored in `f32`.
pub trait Network: Sync {
    fn num_classes(&self) -> usize;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];
    fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>>;
}

/// Records `net`'s parameters on `tape`, differentiable when `trainable`.
pub fn param_vars<'t, N: Network, T: Real>(net: &N, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
    net.params()
        .iter()
        .map(|p| {
            let v = p.cast::<T>();
            if trainable {
                tape.leaf(v)
            } else {
                tape.constant(v)
            }
        })
        .collect()
}

/// Shape of the compact CNN family: fixed input standardization, then
/// `widths.len()` stages of conv3×3 → ReLU → 2×2 average pool, global
/// average pooling and a linear head. A non-local block follows each stage listed in `nonlocal_after`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub nonlocal_after: Vec<usize>,
    pub classes: usize,
}

impl ArchDescriptor {
    /// Two stages of width (16, 32) with non-local blocks after both.
    pub fn compact(in_channels: usize, classes: usize) -> Self {
        Self {
            in_channels,
            widths: vec![16, 32],
            nonlocal_after: vec![0, 1],
            classes,
        }
    }

    pub fn without_nonlocal(mut self) -> Self {
        self.nonlocal_after.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ArmorError::Config(m));
        if self.in_channels == 0 || self.classes < 2 {
            return fail(format!(
                "need >= 1 input channel and >= 2 classes, got {} and {}",
                self.in_channels, self.classes
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail(format!("stage widths must be non-empty and positive: {:?}", self.widths));
        }
        if let Some(&bad) = self.nonlocal_after.iter().find(|&&i| i >= self.widths.len()) {
            return fail(format!(
                "non-local insertion index {bad} beyond {} stages",
                self.widths.len()
            ));
        }
        if self.nonlocal_after.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "non-local insertion indices must be strictly increasing: {:?}",
                self.nonlocal_after
            ));
        }
        Ok(())
    }

    /// Embedding width of a non-local block on `channels` inputs.
    pub fn inter_channels(channels: usize) -> usize {
        (channels / 2).max(1)
    }

    /// Parameter shapes in declaration order: per stage the conv kernel and
    /// bias, then any non-local block (query, key, value, output), then the
    /// head weight and bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = self.in_channels;
        for (s, &w) in self.widths.iter().enumerate() {
            shapes.push(vec![w, c_in, 3, 3]);
            shapes.push(vec![w]);
            if self.nonlocal_after.contains(&s) {
                let ci = Self::inter_channels(w);
                for _ in 0..3 {
                    shapes.push(vec![ci, w, 1, 1]);
                }
                shapes.push(vec![w, ci, 1, 1]);
            }
            c_in = w;
        }
        shapes.push(vec![self.classes, c_in]);
        shapes.push(vec![self.classes]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Non-local attention block weights. All four projections are 1×1
/// convolutions without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalBlock {
    /// `inter×C×1×1`, embeds the attending position.
    pub w_query: Tensor,
    /// `inter×C×1×1`, embeds the attended position.
    pub w_key: Tensor,
    /// `inter×C×1×1`, the value map.
    pub w_value: Tensor,
    /// `C×inter×1×1`, projects back to the input width.
    pub w_out: Tensor,
    pub residual: bool,
}

impl NonLocalBlock {
    /// Random query/key/value projections and a zero output projection, so
    /// a residual block starts as the identity.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let ci = ArchDescriptor::inter_channels(channels);
        let bound = 1.0 / (channels as f32).sqrt();
        let mut proj = || Tensor::from_fn(&[ci, channels, 1, 1], |_| rng.gen_range(-bound..=bound));
        Ok(Self {
            w_query: proj()?,
            w_key: proj()?,
            w_value: proj()?,
            w_out: Tensor::zeros(&[channels, ci, 1, 1])?,
            residual: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_query.shape()[1]
    }

    /// Evaluates the block on an `N×C×H×W` tensor.
    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        let tape = Tape::<f32>::new();
        let w = [&self.w_query, &self.w_key, &self.w_value, &self.w_out].map(|t| tape.constant(t.clone()));
        Ok(nonlocal_forward(tape.constant(a.clone()), &w, self.residual)?.value())
    }

    /// Row-normalized attention weights, `N×P×P` over the `P = H·W` positions.
    pub fn attention(&self, a: &Tensor) -> Result<Tensor> {
        let tape = Tape::<f32>::new();
        let (q, k) = (tape.constant(self.w_query.clone()), tape.constant(self.w_key.clone()));
        Ok(attention_weights(tape.constant(a.clone()), q, k)?.value())
    }
}

fn check_block_input<T: Real>(a: &Var<'_, T>, w_query: &Var<'_, T>) -> Result<(usize, usize, usize, usize, usize)> {
    let s = a.shape();
    let &[n, c, h, w] = &s[..] else {
        return Err(ArmorError::Contract(format!("non-local input must be N×C×H×W, got {s:?}")));
    };
    let ws = w_query.shape();
    if ws.len() != 4 || ws[1] != c {
        return Err(ArmorError::Contract(format!(
            "non-local block expects {} channels, input has {c}",
            ws.get(1).copied().unwrap_or(0)
        )));
    }
    Ok((n, c, h, w, ws[0]))
}

fn attention_weights<'t, T: Real>(a: Var<'t, T>, w_query: Var<'t, T>, w_key: Var<'t, T>) -> Result<Var<'t, T>> {
    let (n, _, h, w, ci) = check_block_input(&a, &w_query)?;
    let p = h * w;
    let q = a.conv2d(w_query, None, 0)?.reshape(&[n, ci, p])?.transpose_last2()?;
    let k = a.conv2d(w_key, None, 0)?.reshape(&[n, ci, p])?;
    Ok(q.bmm(k)?.softmax_last()?)
}

/// Non-local block on the tape. `weights` are query, key, value and output
/// projections. Position `i` of the result aggregates
/// `Σ_j softmax_j(q_iᵀ k_j) · v_j`, projected back to `C` channels and, when
/// `residual`, added to the input.
pub fn nonlocal_forward<'t, T: Real>(a: Var<'t, T>, weights: &[Var<'t, T>; 4], residual: bool) -> Result<Var<'t, T>> {
    let [w_query, w_key, w_value, w_out] = *weights;
    let (n, _, h, w, ci) = check_block_input(&a, &w_query)?;
    let att = attention_weights(a, w_query, w_key)?;
    let v = a.conv2d(w_value, None, 0)?.reshape(&[n, ci, h * w])?.transpose_last2()?;
    let y = att.bmm(v)?.transpose_last2()?.reshape(&[n, ci, h, w])?;
    let out = y.conv2d(w_out, None, 0)?;
    Ok(if residual { out.add(a)? } else { out })
}

/// Fixed input standardization `(x − center) / spread` applied before the
/// first convolution.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_SPREAD: f64 = 0.25;

/// The compact CNN used as surrogate, auxiliary and victim model.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    descriptor: ArchDescriptor,
    params: Vec<Tensor>,
}

/// Deterministic He-uniform initialization from `seed`; non-local output
/// projections start at zero.
pub fn build_surrogate(descriptor: &ArchDescriptor, seed: u64) -> Result<SurrogateModel> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut c_in = descriptor.in_channels;
    for (s, &w) in descriptor.widths.iter().enumerate() {
        let bound = (6.0 / (c_in * 9) as f32).sqrt();
        params.push(Tensor::from_fn(&[w, c_in, 3, 3], |_| rng.gen_range(-bound..=bound))?);
        params.push(Tensor::zeros(&[w])?);
        if descriptor.nonlocal_after.contains(&s) {
            let b = NonLocalBlock::init(w, &mut rng)?;
            params.extend([b.w_query, b.w_key, b.w_value, b.w_out]);
        }
        c_in = w;
    }
    let bound = 1.0 / (c_in as f32).sqrt();
    params.push(Tensor::from_fn(&[descriptor.classes, c_in], |_| rng.gen_range(-bound..=bound))?);
    params.push(Tensor::zeros(&[descriptor.classes])?);
    SurrogateModel::from_params(descriptor.clone(), params)
}

impl SurrogateModel {
    /// Assembles a model from explicit parameters, checking their shapes.
    pub fn from_params(descriptor: ArchDescriptor, params: Vec<Tensor>) -> Result<Self> {
        descriptor.validate()?;
        let shapes = descriptor.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s[..] != *p.shape()) {
            return Err(ArmorError::Contract(format!(
                "parameters do not match descriptor {descriptor:?}"
            )));
        }
        Ok(Self { descriptor, params })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    /// Non-local block following stage `stage`, if any.
    pub fn nonlocal_block(&self, stage: usize) -> Option<NonLocalBlock> {
        let mut i = 0;
        for s in 0..self.descriptor.widths.len() {
            i += 2;
            if self.descriptor.nonlocal_after.contains(&s) {
                if s == stage {
                    return Some(NonLocalBlock {
                        w_query: self.params[i].clone(),
                        w_key: self.params[i + 1].clone(),
                        w_value: self.params[i + 2].clone(),
                        w_out: self.params[i + 3].clone(),
                        residual: true,
                    });
                }
                i += 4;
            }
        }
        None
    }
}

impl Network for SurrogateModel {
    fn num_classes(&self) -> usize {
        self.descriptor.classes
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn forward<'t, T: Real>(&self, tape: &'t Tape<T>, params: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = &self.descriptor;
        if params.len() != self.params.len() {
            return Err(ArmorError::Contract(format!(
                "{} parameter variables for a model with {}",
                params.len(),
                self.params.len()
            )));
        }
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != d.in_channels {
            return Err(ArmorError::Contract(format!(
                "model expects N×{}×H×W input, got {shape:?}",
                d.in_channels
            )));
        }
        let min_side = 1usize << d.widths.len();
        if shape[2] < min_side || shape[3] < min_side {
            return Err(ArmorError::Contract(format!(
                "{} stages need spatial size >= {min_side}, got {}x{}",
                d.widths.len(),
                shape[2],
                shape[3]
            )));
        }
        let center = tape.constant(Tensor::full(&shape, T::lit(INPUT_CENTER))?);
        let mut h = x.sub(center)?.scale(1.0 / INPUT_SPREAD)?;
        let mut i = 0;
        for s in 0..d.widths.len() {
            h = h.conv2d(params[i], Some(params[i + 1]), 1)?.relu()?.avg_pool2()?;
            i += 2;
            if d.nonlocal_after.contains(&s) {
                let w = [params[i], params[i + 1], params[i + 2], params[i + 3]];
                h = nonlocal_forward(h, &w, true)?;
                i += 4;
            }
        }
        Ok(h.global_avg_pool()?.linear(params[i], Some(params[i + 1]))?)
    }
}

/// Mean cross-entropy of `N×K` logits against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let tape = Tape::<f32>::new();
    let loss = tape.constant(logits.clone()).cross_entropy(labels)?;
    Ok(loss.value().data()[0])
}

/// Mean loss and parameter gradients on one batch.
pub fn loss_and_grads<N: Network>(net: &N, batch: &ImageBatch) -> Result<(f32, Vec<Tensor>)> {
    let tape = Tape::<f32>::new();
    let params = param_vars(net, &tape, true);
    let x = tape.constant(batch.images().clone());
    let loss = net.forward(&tape, &params, x)?.cross_entropy(batch.labels())?;
    let grads = tape.backward(loss)?;
    let value = loss.value().data()[0];
    Ok((value, params.iter().map(|&p| grads.wrt(p)).collect()))
}

/// One forward/backward/SGD step per batch, in order, continuing from the
/// current parameters. Returns the per-batch losses.
pub fn train_batches<'a, N: Network>(
    net: &mut N,
    opt: &mut Sgd,
    batches: impl IntoIterator<Item = &'a ImageBatch>,
) -> Result<Vec<f32>> {
    let mut losses = Vec::new();
    for batch in batches {
        let (loss, grads) = loss_and_grads(net, batch)?;
        if !loss.is_finite() {
            return Err(ArmorError::Contract(format!("training loss diverged to {loss}")));
        }
        opt.step(net.params_mut(), &grads)?;
        losses.push(loss);
    }
    if losses.is_empty() {
        return Err(ArmorError::Contract("train_batches needs at least one batch".into()));
    }
    Ok(losses)
}

const EVAL_CHUNK: usize = 256;

/// `N×K` logits, evaluated in chunks.
pub fn logits<N: Network>(net: &N, images: &Tensor) -> Result<Tensor> {
    let (n, ..) = images.dims4()?;
    let chunks: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = par::map_slice(&chunks, |&start| -> Result<Vec<f32>> {
        let tape = Tape::<f32>::new();
        let params = param_vars(net, &tape, false);
        let x = tape.constant(images.slice_outer(start, EVAL_CHUNK.min(n - start))?);
        Ok(net.forward(&tape, &params, x)?.value().into_data())
    });
    let mut data = Vec::with_capacity(n * net.num_classes());
    for p in parts {
        data.extend(p?);
    }
    Ok(Tensor::new(vec![n, net.num_classes()], data)?)
}

/// Index of the largest logit per row, lowest index on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict<N: Network>(net: &N, images: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(net, images)?))
}

/// Fraction of samples whose predicted class differs from the label.
pub fn error_rate<N: Network>(net: &N, data: &ImageBatch) -> Result<f32> {
    if data.is_empty() {
        return Err(ArmorError::Contract("error_rate on an empty dataset".into()));
    }
    let preds = predict(net, data.images())?;
    let wrong = preds.iter().zip(data.labels()).filter(|(p, y)| p != y).count();
    Ok(wrong as f32 / data.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_index_beyond_stages_is_rejected() {
        let mut d = ArchDescriptor::compact(3, 4);
        d.nonlocal_after = vec![0, 2];
        assert!(matches!(build_surrogate(&d, 0), Err(ArmorError::Config(_))));
    }

    #[test]
    fn build_is_deterministic() {
        let d = ArchDescriptor::compact(3, 4);
        assert_eq!(build_surrogate(&d, 9).unwrap(), build_surrogate(&d, 9).unwrap());
        assert_ne!(build_surrogate(&d, 9).unwrap(), build_surrogate(&d, 10).unwrap());
    }

    #[test]
    fn forward_yields_n_by_k_logits() {
        let m = build_surrogate(&ArchDescriptor::compact(3, 5), 1).unwrap();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f32 / 7.0).unwrap();
        assert_eq!(logits(&m, &x).unwrap().shape(), &[2, 5]);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::zeros(&[1, 10]).unwrap();
        assert!((cross_entropy(&uniform, &[4]).unwrap() - 2.302585).abs() < 1e-6);
        let mut peaked = vec![0.0; 10];
        peaked[2] = 30.0;
        let peaked = Tensor::new(vec![1, 10], peaked).unwrap();
        assert!(cross_entropy(&peaked, &[2]).unwrap() < 1e-9);
        let two = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!((cross_entropy(&two, &[1]).unwrap() - 0.313262).abs() < 1e-6);
        assert!(cross_entropy(&two, &[2]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
