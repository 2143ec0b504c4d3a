//! Xception-style classifier over co-occurrence tensors.
//!
//! Layout: a stem of strided 3x3 convolutions, residual entry blocks of two separable
//! convolutions plus a strided max-pool (1x1 strided projection on the shortcut), residual
//! middle blocks of three separable convolutions, an exit stack of separable convolutions,
//! global average pooling and a dense head. There is no batch normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cooccur::{CoocTensor, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{
    sigmoid, sigmoid_xent, softmax, softmax_xent, uniform_init, Graph, NodeId, Padding, ParamId,
    ParamStore, Scalar, SparseBatch, Tensor,
};

/// Examples processed per recorded graph; bounds activation memory.
pub const MICRO_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "classes", rename_all = "lowercase")]
pub enum Head {
    /// One logit, sigmoid probability of "generated".
    Detection,
    /// One logit per class, softmax.
    Attribution(usize),
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Detection => 1,
            Head::Attribution(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Mini,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_depth: usize,
    pub stem_widths: Vec<usize>,
    pub stem_strides: Vec<usize>,
    pub entry_widths: Vec<usize>,
    pub middle_blocks: usize,
    pub middle_width: usize,
    pub exit_widths: Vec<usize>,
    pub head: Head,
    pub scale: Scale,
}

impl ArchConfig {
    /// Desk-scale preset, roughly a quarter of Xception's widths.
    pub fn mini(input_depth: usize, head: Head) -> Self {
        Self {
            input_depth,
            stem_widths: vec![16, 32],
            stem_strides: vec![2, 2],
            entry_widths: vec![64, 128, 256],
            middle_blocks: 4,
            middle_width: 256,
            exit_widths: vec![384, 512],
            head,
            scale: Scale::Mini,
        }
    }

    /// Xception's published widths.
    pub fn full(input_depth: usize, head: Head) -> Self {
        Self {
            input_depth,
            stem_widths: vec![32, 64],
            stem_strides: vec![2, 1],
            entry_widths: vec![128, 256, 728],
            middle_blocks: 8,
            middle_width: 728,
            exit_widths: vec![1536, 2048],
            head,
            scale: Scale::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_depth == 0 {
            return bad("input depth must be positive".into());
        }
        if self.stem_widths.is_empty() {
            return bad("at least one stem convolution is required".into());
        }
        if self.stem_widths.len() != self.stem_strides.len() {
            return bad(format!(
                "{} stem widths but {} stem strides",
                self.stem_widths.len(),
                self.stem_strides.len()
            ));
        }
        let widths = self
            .stem_widths
            .iter()
            .chain(&self.entry_widths)
            .chain(&self.exit_widths);
        if widths.clone().any(|&w| w == 0) || self.stem_strides.contains(&0) {
            return bad("widths and strides must be positive".into());
        }
        let stream_width = *self
            .entry_widths
            .last()
            .unwrap_or_else(|| self.stem_widths.last().expect("nonempty"));
        if self.middle_blocks > 0 && self.middle_width != stream_width {
            return bad(format!(
                "middle width {} must equal the entry output width {stream_width}",
                self.middle_width
            ));
        }
        if let Head::Attribution(c) = self.head {
            if c < 2 {
                return bad(format!("attribution head needs at least 2 classes, got {c}"));
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector that feeds the head.
    pub fn penultimate_width(&self) -> usize {
        *self
            .exit_widths
            .last()
            .or(self.entry_widths.last())
            .or(self.stem_widths.last())
            .expect("validated config has a stem")
    }
}

#[derive(Debug, Clone, Copy)]
struct SepIds {
    depthwise: ParamId,
    pointwise: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct EntryIds {
    sep: [SepIds; 2],
    skip_w: ParamId,
    skip_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Vec<(ParamId, ParamId, usize)>,
    entry: Vec<EntryIds>,
    middle: Vec<[SepIds; 3]>,
    exit: Vec<SepIds>,
    head: (ParamId, ParamId),
}

/// Training targets for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Binary(&'a [bool]),
    Classes(&'a [usize]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Binary(t) => t.len(),
            Targets::Classes(t) => t.len(),
        }
    }

    fn range(&self, start: usize, end: usize) -> Targets<'_> {
        match self {
            Targets::Binary(t) => Targets::Binary(&t[start..end]),
            Targets::Classes(t) => Targets::Classes(&t[start..end]),
        }
    }
}

/// Loss and summed parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub parameter_count: usize,
    pub penultimate_width: usize,
    pub layers: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct MiniXception<T: Scalar = f32> {
    config: ArchConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> MiniXception<T> {
    /// Seeded initialisation: fan-in scaled uniform weights, zero biases.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let sep = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| SepIds {
            depthwise: params.push(format!("{name}.depthwise"), uniform_init(&[3, 3, cin], 9, 3.0, rng)),
            pointwise: params.push(
                format!("{name}.pointwise"),
                uniform_init(&[1, 1, cin, cout], cin, 6.0, rng),
            ),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[cout])),
        };

        let mut width = config.input_depth;
        let mut stem = Vec::new();
        for (i, (&w, &s)) in config.stem_widths.iter().zip(&config.stem_strides).enumerate() {
            let k = params.push(
                format!("stem{i}.kernel"),
                uniform_init(&[3, 3, width, w], 9 * width, 6.0, &mut rng),
            );
            let b = params.push(format!("stem{i}.bias"), Tensor::zeros(&[w]));
            stem.push((k, b, s));
            width = w;
        }
        let mut entry = Vec::new();
        for (i, &w) in config.entry_widths.iter().enumerate() {
            let a = sep(&mut params, &mut rng, &format!("entry{i}.sep0"), width, w);
            let b = sep(&mut params, &mut rng, &format!("entry{i}.sep1"), w, w);
            let skip_w = params.push(
                format!("entry{i}.skip.kernel"),
                uniform_init(&[1, 1, width, w], width, 3.0, &mut rng),
            );
            let skip_b = params.push(format!("entry{i}.skip.bias"), Tensor::zeros(&[w]));
            entry.push(EntryIds {
                sep: [a, b],
                skip_w,
                skip_b,
            });
            width = w;
        }
        let mut middle = Vec::new();
        for i in 0..config.middle_blocks {
            let s: Vec<SepIds> = (0..3)
                .map(|j| sep(&mut params, &mut rng, &format!("middle{i}.sep{j}"), width, width))
                .collect();
            middle.push([s[0], s[1], s[2]]);
        }
        let mut exit = Vec::new();
        for (i, &w) in config.exit_widths.iter().enumerate() {
            exit.push(sep(&mut params, &mut rng, &format!("exit.sep{i}"), width, w));
            width = w;
        }
        let out = config.head.outputs();
        let head_w = params.push("head.kernel", uniform_init(&[width, out], width, 3.0, &mut rng));
        let head_b = params.push("head.bias", Tensor::zeros(&[out]));
        Ok(Self {
            config,
            params,
            layout: Layout {
                stem,
                entry,
                middle,
                exit,
                head: (head_w, head_b),
            },
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            parameter_count: self.params.scalar_count(),
            penultimate_width: self.config.penultimate_width(),
            layers: self
                .params
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.weights.shape().to_vec()))
                .collect(),
        }
    }

    /// Packs co-occurrence tensors into the sparse batch consumed by the stem.
    pub fn batch_input(&self, batch: &[&CoocTensor]) -> Result<SparseBatch<T>> {
        let entries = batch
            .iter()
            .map(|t| {
                if t.depth() != self.config.input_depth {
                    return Err(Error::DepthMismatch {
                        expected: self.config.input_depth,
                        actual: t.depth(),
                    });
                }
                Ok(t.nonzeros()
                    .map(|(i, v)| (i as u32, T::from_f64_lossy(v as f64)))
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseBatch {
            height: LEVELS,
            width: LEVELS,
            channels: self.config.input_depth,
            entries,
        })
    }

    fn check_input(&self, input: &SparseBatch<T>) -> Result<()> {
        if input.channels != self.config.input_depth {
            return Err(Error::DepthMismatch {
                expected: self.config.input_depth,
                actual: input.channels,
            });
        }
        if (input.height, input.width) != (LEVELS, LEVELS) {
            return Err(Error::Shape(format!(
                "model input must be {LEVELS}x{LEVELS}, got {}x{}",
                input.height, input.width
            )));
        }
        Ok(())
    }

    /// Records the network on `graph`; returns `(logits, pooled features)`.
    pub fn forward_graph(&self, graph: &mut Graph<'_, T>, input: SparseBatch<T>) -> Result<(NodeId, NodeId)> {
        self.check_input(&input)?;
        let l = &self.layout;
        let (k0, b0, s0) = l.stem[0];
        let mut x = graph.sparse_conv2d(input, k0, Some(b0), s0, Padding::Same)?;
        x = graph.relu(x);
        for &(k, b, s) in &l.stem[1..] {
            x = graph.conv2d(x, k, Some(b), s, Padding::Same)?;
            x = graph.relu(x);
        }
        let sep = |g: &mut Graph<'_, T>, x: NodeId, ids: &SepIds| {
            g.separable_conv2d(x, ids.depthwise, ids.pointwise, Some(ids.bias))
        };
        for (i, block) in l.entry.iter().enumerate() {
            let skip = graph.conv2d(x, block.skip_w, Some(block.skip_b), 2, Padding::Same)?;
            // The stem already ends in a ReLU.
            let mut h = if i == 0 { x } else { graph.relu(x) };
            h = sep(graph, h, &block.sep[0])?;
            h = graph.relu(h);
            h = sep(graph, h, &block.sep[1])?;
            h = graph.maxpool(h, 3, 2)?;
            x = graph.add(h, skip)?;
        }
        for block in &l.middle {
            let mut h = x;
            for ids in block {
                h = graph.relu(h);
                h = sep(graph, h, ids)?;
            }
            x = graph.add(x, h)?;
        }
        x = graph.relu(x);
        for ids in &l.exit {
            x = sep(graph, x, ids)?;
            x = graph.relu(x);
        }
        let pooled = graph.global_avg_pool(x)?;
        let logits = graph.dense(pooled, l.head.0, Some(l.head.1))?;
        Ok((logits, pooled))
    }

    fn run_chunks<R: Send>(
        &self,
        batch: &[&CoocTensor],
        f: impl Fn(&[&CoocTensor], usize) -> Result<R> + Sync + Send,
    ) -> Result<Vec<R>> {
        batch
            .par_chunks(MICRO_BATCH)
            .enumerate()
            .map(|(i, chunk)| f(chunk, i * MICRO_BATCH))
            .collect()
    }

    /// Pre-activation outputs, `[n, head outputs]`.
    pub fn forward(&self, batch: &[&CoocTensor]) -> Result<Tensor<T>> {
        self.forward_both(batch).map(|(logits, _)| logits)
    }

    /// Pooled penultimate features, `[n, penultimate width]`.
    pub fn embed(&self, batch: &[&CoocTensor]) -> Result<Tensor<T>> {
        self.forward_both(batch).map(|(_, pooled)| pooled)
    }

    pub fn forward_both(&self, batch: &[&CoocTensor]) -> Result<(Tensor<T>, Tensor<T>)> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let parts = self.run_chunks(batch, |chunk, _| {
            let input = self.batch_input(chunk)?;
            let mut g = Graph::new(&self.params);
            let (logits, pooled) = self.forward_graph(&mut g, input)?;
            Ok((g.value(logits).clone(), g.value(pooled).clone()))
        })?;
        let (logits, pooled): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        Ok((Tensor::stack_outer(&logits)?, Tensor::stack_outer(&pooled)?))
    }

    /// Head activation applied to logits: sigmoid for detection, softmax for attribution.
    pub fn probabilities(&self, logits: &Tensor<T>) -> Vec<Vec<f64>> {
        let width = self.config.head.outputs();
        logits
            .data()
            .chunks_exact(width)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                match self.config.head {
                    Head::Detection => vec![sigmoid(row[0])],
                    Head::Attribution(_) => softmax(&row),
                }
            })
            .collect()
    }

    /// Mean cross-entropy over the batch and its gradient for every parameter.
    ///
    /// Micro-batches are reduced in a fixed order, so the result does not depend on how
    /// many worker threads ran them.
    pub fn loss_and_grads(&self, batch: &[&CoocTensor], targets: Targets<'_>) -> Result<BatchGradients<T>> {
        if batch.is_empty() || batch.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} examples for {} targets",
                batch.len(),
                targets.len()
            )));
        }
        let total = batch.len() as f64;
        let parts = self.run_chunks(batch, |chunk, start| {
            let t = targets.range(start, start + chunk.len());
            let input = self.batch_input(chunk)?;
            let mut g = Graph::new(&self.params);
            let (logits, _) = self.forward_graph(&mut g, input)?;
            let z = g.value(logits);
            let (loss, mut dz) = match (self.config.head, t) {
                (Head::Detection, Targets::Binary(y)) => sigmoid_xent(z, y)?,
                (Head::Attribution(_), Targets::Classes(y)) => softmax_xent(z, y)?,
                _ => {
                    return Err(Error::InvalidArgument(
                        "target kind does not match the model head".into(),
                    ))
                }
            };
            // Chunk losses are chunk means; reweight to a mean over the full batch.
            let w = chunk.len() as f64 / total;
            dz.scale(T::from_f64_lossy(w));
            let grads = g.backward(logits, &dz)?;
            Ok((loss * w, grads.params, z.clone()))
        })?;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor<T>>> = None;
        let mut logits = Vec::with_capacity(parts.len());
        for (l, g, z) in parts {
            loss += l;
            logits.push(z);
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        Ok(BatchGradients {
            loss,
            grads: grads.expect("nonempty batch"),
            logits: Tensor::stack_outer(&logits)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooccur::{feature_tensor, PairSubset};
    use crate::imagecore::PixelImage;
    use rand::Rng;

    fn tiny(depth: usize, head: Head) -> ArchConfig {
        ArchConfig {
            input_depth: depth,
            stem_widths: vec![4, 4],
            stem_strides: vec![4, 4],
            entry_widths: vec![6],
            middle_blocks: 1,
            middle_width: 6,
            exit_widths: vec![8],
            head,
            scale: Scale::Custom,
        }
    }

    fn random_image(seed: u64) -> PixelImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..24 * 24 * 3).map(|_| rng.gen_range(100..140)).collect();
        PixelImage::new(24, 24, 3, data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny(12, Head::Detection);
        let a = MiniXception::<f32>::build(cfg.clone(), 5).unwrap();
        let b = MiniXception::<f32>::build(cfg.clone(), 5).unwrap();
        let c = MiniXception::<f32>::build(cfg, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn head_shapes() {
        let t = feature_tensor(&random_image(1), &PairSubset::hvda());
        let det = MiniXception::<f32>::build(tiny(12, Head::Detection), 0).unwrap();
        assert_eq!(det.forward(&[&t, &t]).unwrap().shape(), &[2, 1]);
        let att = MiniXception::<f32>::build(tiny(12, Head::Attribution(6)), 0).unwrap();
        let z = att.forward(&[&t, &t, &t]).unwrap();
        assert_eq!(z.shape(), &[3, 6]);
        let p = att.probabilities(&z);
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_input_gives_half() {
        let zero = CoocTensor::zeros(12, PairSubset::hvda());
        let m = MiniXception::<f32>::build(tiny(12, Head::Detection), 3).unwrap();
        let z = m.forward(&[&zero]).unwrap();
        assert_eq!(m.probabilities(&z)[0][0], 0.5);
    }

    #[test]
    fn depth_mismatch_is_reported() {
        let t = feature_tensor(&random_image(1), &PairSubset::hv());
        let m = MiniXception::<f32>::build(tiny(12, Head::Detection), 0).unwrap();
        match m.forward(&[&t]) {
            Err(Error::DepthMismatch { expected, actual }) => assert_eq!((expected, actual), (12, 6)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identical_rows_and_batch_permutation() {
        let a = feature_tensor(&random_image(1), &PairSubset::hvda());
        let b = feature_tensor(&random_image(2), &PairSubset::hvda());
        let m = MiniXception::<f32>::build(tiny(12, Head::Attribution(3)), 0).unwrap();
        let z = m.forward(&[&a, &a, &a]).unwrap();
        assert_eq!(z.data()[0..3], z.data()[3..6]);
        let ab = m.forward(&[&a, &b]).unwrap();
        let ba = m.forward(&[&b, &a]).unwrap();
        assert_eq!(ab.data()[0..3], ba.data()[3..6]);
        assert_eq!(ab.data()[3..6], ba.data()[0..3]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny(12, Head::Detection);
        c.middle_width = 7;
        assert!(MiniXception::<f32>::build(c, 0).is_err());
        let mut c = tiny(12, Head::Attribution(1));
        c.middle_blocks = 0;
        assert!(MiniXception::<f32>::build(c, 0).is_err());
        let mut c = tiny(12, Head::Detection);
        c.stem_strides.pop();
        assert!(MiniXception::<f32>::build(c, 0).is_err());
    }

    #[test]
    fn mini_preset_budget() {
        let m = MiniXception::<f32>::build(ArchConfig::mini(12, Head::Detection), 0).unwrap();
        let s = m.summary();
        assert!(s.parameter_count < 2_000_000, "{}", s.parameter_count);
        assert_eq!(s.penultimate_width, 512);
    }

    #[test]
    fn micro_batch_reduction_matches_single_pass() {
        let imgs: Vec<_> = (0..11)
            .map(|s| feature_tensor(&random_image(s), &PairSubset::hvda()))
            .collect();
        let refs: Vec<&CoocTensor> = imgs.iter().collect();
        let labels: Vec<bool> = (0..11).map(|i| i % 3 == 0).collect();
        let m = MiniXception::<f64>::build(tiny(12, Head::Detection), 1).unwrap();
        let full = m.loss_and_grads(&refs, Targets::Binary(&labels)).unwrap();
        // Reference: per-example gradients averaged by hand.
        let mut acc: Vec<Tensor<f64>> = m.params().params().iter().map(|p| Tensor::zeros(p.weights.shape())).collect();
        let mut loss = 0.0;
        for (t, &y) in refs.iter().zip(&labels) {
            let one = m.loss_and_grads(&[*t], Targets::Binary(&[y])).unwrap();
            loss += one.loss / 11.0;
            for (a, g) in acc.iter_mut().zip(&one.grads) {
                a.add_assign(&g.map(|v| v / 11.0)).unwrap();
            }
        }
        assert!((full.loss - loss).abs() < 1e-12);
        for (a, b) in acc.iter().zip(&full.grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
