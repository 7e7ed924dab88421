//! Patch-wise encoder, codebook bottleneck and linear classifier.
//!
//! An `s x s` image is cut into a `g x g` grid of `p x p` patches; every
//! patch goes through the same MLP, giving a `g x g x d_c` feature grid.
//! The classifier mean-pools the (quantized) grid and applies one affine map.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::codebook::{FeatureGrid, Codebook};
use crate::error::{invalid, Error, Result};
use crate::rng::Prng;
use crate::scalar::Scalar;

pub const DEFAULT_TEACHER_DECAY: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 0.1, eta: crate::codebook::DEFAULT_ETA, temperature: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) || !ok(self.eta) {
            return Err(invalid("loss weights must be finite and nonnegative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Architecture of the patch encoder and classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub patch: usize,
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut Prng) -> Result<Self> {
        let std = (gain / inputs as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| T::of(std * rng.normal())).collect();
        Ok(Self { weight: Tensor::matrix(outputs, inputs, w)?, bias: Tensor::zeros(vec![outputs]) })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Encoder layers (relu between them, none after the last) and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Vec<Linear<T>>,
    pub classifier: Linear<T>,
}

/// Graph handles for one registration of [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub classifier: (NodeId, NodeId),
}

impl ParamNodes {
    pub fn all(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.encoder.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.extend([self.classifier.0, self.classifier.1]);
        ids
    }
}

impl<T: Scalar> ModelParams<T> {
    /// He-normal weights for relu layers, `1/fan_in` variance otherwise; zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.patch == 0 || arch.hidden == 0 || arch.dim == 0 || arch.classes < 2 {
            return Err(invalid(format!("invalid architecture {arch:?}")));
        }
        let mut rng = Prng::new(seed);
        let encoder = vec![
            Linear::init(arch.patch * arch.patch, arch.hidden, 2.0, &mut rng)?,
            Linear::init(arch.hidden, arch.dim, 1.0, &mut rng)?,
        ];
        let classifier = Linear::init(arch.dim, arch.classes, 1.0, &mut rng)?;
        Ok(Self { encoder, classifier })
    }

    pub fn architecture(&self) -> Architecture {
        let patch_area = self.encoder[0].inputs();
        let patch = (patch_area as f64).sqrt().round() as usize;
        Architecture { patch, hidden: self.encoder[0].outputs(), dim: self.dim(), classes: self.classes() }
    }

    pub fn dim(&self) -> usize {
        self.encoder.last().map(Linear::outputs).unwrap_or(0)
    }

    pub fn classes(&self) -> usize {
        self.classifier.outputs()
    }

    /// Parameters in a fixed order: encoder `(w, b)` pairs, then classifier.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.encoder.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.extend([&self.classifier.weight, &self.classifier.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.encoder.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        out.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        out
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    /// Adds every parameter to `graph`, trainable or constant.
    pub fn register(&self, graph: &mut Graph<T>, trainable: bool) -> ParamNodes {
        let mut leaf = |t: &Tensor<T>| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) };
        let encoder = self.encoder.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        let classifier = (leaf(&self.classifier.weight), leaf(&self.classifier.bias));
        ParamNodes { encoder, classifier }
    }
}

/// Cuts each `side x side` image into `patch x patch` tiles. Output rows are
/// ordered (image, tile row, tile column); each row is a row-major tile.
pub fn extract_patches<T: Scalar>(images: &[T], side: usize, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || side % patch != 0 {
        return Err(invalid(format!("image side {side} is not divisible by patch size {patch}")));
    }
    if images.len() % (side * side) != 0 || images.is_empty() {
        return Err(invalid(format!("{} values do not form {side}x{side} images", images.len())));
    }
    let count = images.len() / (side * side);
    let g = side / patch;
    let mut rows = Vec::with_capacity(images.len());
    for img in images.chunks_exact(side * side) {
        for ti in 0..g {
            for tj in 0..g {
                for r in 0..patch {
                    let start = (ti * patch + r) * side + tj * patch;
                    rows.extend_from_slice(&img[start..start + patch]);
                }
            }
        }
    }
    Tensor::matrix(count * g * g, patch * patch, rows)
}

/// Encoder on a `(rows, p*p)` patch matrix: `(rows, d_c)` features.
pub fn encode_nodes<T: Scalar>(graph: &mut Graph<T>, nodes: &ParamNodes, patches: NodeId) -> Result<NodeId> {
    let mut h = patches;
    let last = nodes.encoder.len() - 1;
    for (i, &(w, b)) in nodes.encoder.iter().enumerate() {
        h = graph.affine(h, w, b)?;
        if i < last {
            h = graph.relu(h)?;
        }
    }
    Ok(h)
}

/// Mean-pools `cells` rows per sample and applies the classifier.
pub fn classify_nodes<T: Scalar>(graph: &mut Graph<T>, nodes: &ParamNodes, features: NodeId, cells: usize) -> Result<NodeId> {
    let pooled = graph.mean_rows(features, cells)?;
    graph.affine(pooled, nodes.classifier.0, nodes.classifier.1)
}

/// Result of a batch forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub params: ParamNodes,
    /// Continuous encoder output, `(batch * cells, d_c)`.
    pub z: NodeId,
    /// What the classifier consumed: the straight-through node, or `z` when
    /// quantization is disabled.
    pub zq: NodeId,
    pub indices: Option<Vec<usize>>,
    pub sq_distances: Option<Vec<T>>,
    pub logits: NodeId,
}

/// Encoder, optional quantization and classifier on a batch of images.
pub fn forward<T: Scalar>(
    graph: &mut Graph<T>,
    params: &ModelParams<T>,
    trainable: bool,
    images: &[T],
    side: usize,
    codebook: Option<&Codebook<T>>,
) -> Result<Forward<T>> {
    let arch = params.architecture();
    let patches = extract_patches(images, side, arch.patch)?;
    let cells = (side / arch.patch) * (side / arch.patch);
    let nodes = params.register(graph, trainable);
    let x = graph.constant(patches);
    let z = encode_nodes(graph, &nodes, x)?;
    let (zq, indices, dists) = match codebook {
        Some(cb) => {
            let (zq, idx, d) = cb.quantize_straight_through(graph, z)?;
            (zq, Some(idx), Some(d))
        }
        None => (z, None, None),
    };
    let logits = classify_nodes(graph, &nodes, zq, cells)?;
    Ok(Forward { params: nodes, z, zq, indices, sq_distances: dists, logits })
}

/// Feature grid of a single image.
pub fn encode<T: Scalar>(image: &[T], side: usize, params: &ModelParams<T>) -> Result<FeatureGrid<T>> {
    if image.len() != side * side {
        return Err(invalid(format!("expected one {side}x{side} image, got {} values", image.len())));
    }
    let arch = params.architecture();
    let mut graph = Graph::new();
    let nodes = params.register(&mut graph, false);
    let x = graph.constant(extract_patches(image, side, arch.patch)?);
    let z = encode_nodes(&mut graph, &nodes, x)?;
    let g = side / arch.patch;
    FeatureGrid::new(g, g, arch.dim, graph.value(z).values().to_vec())
}

/// Logits for a single (quantized) feature grid.
pub fn classify<T: Scalar>(zq: &FeatureGrid<T>, params: &ModelParams<T>) -> Result<Vec<T>> {
    if zq.channels != params.dim() {
        return Err(Error::ShapeMismatch {
            op: "classify",
            detail: format!("grid channels {} vs classifier input {}", zq.channels, params.dim()),
        });
    }
    let mut graph = Graph::new();
    let nodes = params.register(&mut graph, false);
    let f = graph.constant(Tensor::matrix(zq.cells(), zq.channels, zq.values.clone())?);
    let logits = classify_nodes(&mut graph, &nodes, f, zq.cells())?;
    Ok(graph.value(logits).values().to_vec())
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub classification: NodeId,
    pub consistency: NodeId,
    pub commitment: Option<NodeId>,
}

/// `L_cla + alpha * L_con + beta * L_comm`. Teacher logits are constants.
pub fn total_loss<T: Scalar>(
    graph: &mut Graph<T>,
    student_logits: NodeId,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    commitment: Option<NodeId>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let classification = graph.cross_entropy(student_logits, labels)?;
    let consistency = graph.kl_consistency(student_logits, teacher_logits, T::of(weights.temperature))?;
    let weighted_con = graph.scale(consistency, T::of(weights.alpha))?;
    let mut total = graph.add(classification, weighted_con)?;
    if let Some(c) = commitment {
        let weighted = graph.scale(c, T::of(weights.beta))?;
        total = graph.add(total, weighted)?;
    }
    Ok(LossTerms { total, classification, consistency, commitment })
}

/// Shadow copy of the student, updated as an exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T> {
    pub params: ModelParams<T>,
    pub decay: T,
}

impl<T: Scalar> TeacherState<T> {
    pub fn new(student: &ModelParams<T>, decay: T) -> Result<Self> {
        if !(decay >= T::zero() && decay < T::one()) {
            return Err(invalid(format!("teacher decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { params: student.clone(), decay })
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`.
    pub fn update(&mut self, student: &ModelParams<T>) -> Result<()> {
        if !self.params.same_shapes(student) {
            return Err(Error::ShapeMismatch { op: "teacher_ema_update", detail: "teacher and student shapes differ".into() });
        }
        let keep = self.decay;
        let take = T::one() - keep;
        for (t, s) in self.params.tensors_mut().into_iter().zip(student.tensors()) {
            for (tv, &sv) in t.values_mut().iter_mut().zip(s.values()) {
                *tv = keep * *tv + take * sv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::UpdateMode;

    fn arch() -> Architecture {
        Architecture { patch: 2, hidden: 5, dim: 3, classes: 4 }
    }

    #[test]
    fn patches_follow_tile_order() {
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let p = extract_patches(&img, 4, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.values()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.values()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(extract_patches(&img, 4, 3).is_err());
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let mut params = ModelParams::<f64>::init(&arch(), 1).unwrap();
        for t in params.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let z = encode(&img, 4, &params).unwrap();
        assert_eq!((z.height, z.width, z.channels), (2, 2, 3));
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(classify(&z, &params).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_gives_equal_cells() {
        let params = ModelParams::<f64>::init(&arch(), 2).unwrap();
        let z = encode(&[0.3; 16], 4, &params).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(z.cell(i, j), z.cell(0, 0));
            }
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let params = ModelParams::<f64>::init(&arch(), 3).unwrap();
        let mut rng = Prng::new(4);
        let vals: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let g = FeatureGrid::new(2, 2, 3, vals.clone()).unwrap();
        let mut permuted = vals[6..9].to_vec();
        permuted.extend_from_slice(&vals[0..6]);
        permuted.extend_from_slice(&vals[9..12]);
        let gp = FeatureGrid::new(2, 2, 3, permuted).unwrap();
        let a = classify(&g, &params).unwrap();
        let b = classify(&gp, &params).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        let same = FeatureGrid::new(2, 2, 3, vals[0..3].repeat(4)).unwrap();
        let single = FeatureGrid::new(1, 1, 3, vals[0..3].to_vec()).unwrap();
        let (a, b) = (classify(&same, &params).unwrap(), classify(&single, &params).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        let wrong = FeatureGrid::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert!(classify(&wrong, &params).is_err());
    }

    #[test]
    fn loss_reductions() {
        let mut g = Graph::<f64>::new();
        let s = g.param(Tensor::matrix(1, 3, vec![0.2, -0.4, 1.0]).unwrap());
        let teacher = Tensor::matrix(1, 3, vec![0.2, -0.4, 1.0]).unwrap();
        let c = g.param(Tensor::scalar(0.7).unwrap());
        let w = LossWeights { alpha: 2.0, beta: 0.1, eta: 0.25, temperature: 10.0 };
        let terms = total_loss(&mut g, s, &teacher, &[2], Some(c), &w).unwrap();
        assert_eq!(g.value(terms.consistency).item(), 0.0);
        let expected = g.value(terms.classification).item() + 0.1 * 0.7;
        assert!((g.value(terms.total).item() - expected).abs() < 1e-15);

        let mut g = Graph::new();
        let s = g.param(Tensor::matrix(1, 3, vec![0.2, -0.4, 1.0]).unwrap());
        let other = Tensor::matrix(1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let w0 = LossWeights { alpha: 0.0, beta: 0.0, ..w };
        let terms = total_loss(&mut g, s, &other, &[2], Some(c), &w0).unwrap();
        assert_eq!(g.value(terms.total).item(), g.value(terms.classification).item());
    }

    #[test]
    fn loss_is_linear_in_alpha() {
        let eval = |alpha: f64| {
            let mut g = Graph::new();
            let s = g.param(Tensor::matrix(2, 3, vec![0.2, -0.4, 1.0, 0.5, 0.5, -2.0]).unwrap());
            let teacher = Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.0, 0.3, 0.1]).unwrap();
            let w = LossWeights { alpha, beta: 0.1, eta: 0.25, temperature: 2.0 };
            let terms = total_loss(&mut g, s, &teacher, &[2, 0], None, &w).unwrap();
            (g.value(terms.total).item(), g.value(terms.consistency).item())
        };
        let h = 1e-3;
        let slope = (eval(2.0 + h).0 - eval(2.0 - h).0) / (2.0 * h);
        assert!((slope - eval(2.0).1).abs() < 1e-9);
    }

    #[test]
    fn invalid_weights_rejected() {
        let bad = LossWeights { temperature: 0.0, ..LossWeights::default() };
        assert!(bad.validate().is_err());
        let bad = LossWeights { alpha: -1.0, ..LossWeights::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn teacher_ema() {
        let student = ModelParams::<f64>::init(&arch(), 5).unwrap();
        let t0 = ModelParams::<f64>::init(&arch(), 6).unwrap();
        let mut copy = TeacherState::new(&t0, 0.0).unwrap();
        copy.update(&student).unwrap();
        assert_eq!(copy.params, student);

        assert!(TeacherState::new(&student, 1.0).is_err());

        let mut teacher = TeacherState { params: t0.clone(), decay: 0.999 };
        let k = 25;
        for _ in 0..k {
            teacher.update(&student).unwrap();
        }
        let factor = 0.999f64.powi(k);
        for ((t, s), init) in teacher.params.tensors().iter().zip(student.tensors()).zip(t0.tensors()) {
            for ((&tv, &sv), &iv) in t.values().iter().zip(s.values()).zip(init.values()) {
                assert!((tv - (sv + factor * (iv - sv))).abs() < 1e-12);
            }
        }

        let other = ModelParams::<f64>::init(&Architecture { hidden: 7, ..arch() }, 1).unwrap();
        assert!(teacher.update(&other).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_teacher_gets_no_grad() {
        let params = ModelParams::<f64>::init(&arch(), 8).unwrap();
        let cb = Codebook::<f64>::init(6, 3, 0.99, UpdateMode::Ema, 9).unwrap();
        let mut rng = Prng::new(10);
        let imgs: Vec<f64> = (0..32).map(|_| rng.uniform()).collect();
        let run = || {
            let mut g = Graph::new();
            let f = forward(&mut g, &params, true, &imgs, 4, Some(&cb)).unwrap();
            g.value(f.logits).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());

        let mut g = Graph::new();
        let teacher = forward(&mut g, &params, false, &imgs, 4, Some(&cb)).unwrap();
        let student = forward(&mut g, &params, true, &imgs, 4, Some(&cb)).unwrap();
        let tl = g.value(teacher.logits).clone();
        let terms = total_loss(&mut g, student.logits, &tl, &[0, 1], None, &LossWeights::default()).unwrap();
        g.backward(terms.total).unwrap();
        for id in teacher.params.all() {
            assert!(g.grad(id).is_none());
        }
        for id in student.params.all() {
            assert!(g.grad(id).is_some());
        }
    }
}
