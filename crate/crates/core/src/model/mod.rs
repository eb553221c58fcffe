//! PointNet-style classifier split into a feature extractor and a classifier
//! head, with a discriminator attached to the extractor output.
//!
//! The extractor applies the same MLP to every point (3→64→128→1024 by
//! default) and max-pools over points, so its output is invariant to point
//! order. There is no activation after the last point layer; pooling is the
//! nonlinearity there.

mod checkpoint;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{he_weight, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Disjoint parameter groups; every trainable tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Extractor,
    Classifier,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Extractor, Group::Classifier, Group::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            Group::Extractor => "extractor",
            Group::Classifier => "classifier",
            Group::Discriminator => "discriminator",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Group::Extractor => 0,
            Group::Classifier => 1,
            Group::Discriminator => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Group::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub class_count: usize,
    /// Output widths of the shared per-point layers; the last one is the
    /// latent dimension.
    pub point_widths: Vec<usize>,
    /// Hidden widths of the classifier head before the class layer.
    pub classifier_widths: Vec<usize>,
    pub discriminator_hidden: usize,
}

impl ModelConfig {
    pub fn new(class_count: usize) -> Self {
        ModelConfig {
            class_count,
            point_widths: vec![64, 128, 1024],
            classifier_widths: vec![512, 256],
            discriminator_hidden: 256,
        }
    }

    pub fn latent_dim(&self) -> usize {
        *self.point_widths.last().expect("validated")
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("class_count must be at least 2"));
        }
        if self.point_widths.is_empty() {
            return Err(Error::config("the extractor needs at least one layer"));
        }
        let widths = self
            .point_widths
            .iter()
            .chain(&self.classifier_widths)
            .chain([&self.discriminator_hidden]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    /// Parameter names, groups and shapes in canonical order.
    fn layout(&self) -> Vec<(String, Group, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push_linear = |prefix: String, group, fan_in, fan_out| {
            out.push((format!("{prefix}.weight"), group, vec![fan_in, fan_out]));
            out.push((format!("{prefix}.bias"), group, vec![fan_out]));
        };
        let mut fan_in = 3;
        for (i, &w) in self.point_widths.iter().enumerate() {
            push_linear(format!("point{}", i + 1), Group::Extractor, fan_in, w);
            fan_in = w;
        }
        let latent = fan_in;
        for (i, &w) in self.classifier_widths.iter().enumerate() {
            push_linear(format!("fc{}", i + 1), Group::Classifier, fan_in, w);
            fan_in = w;
        }
        push_linear(
            format!("fc{}", self.classifier_widths.len() + 1),
            Group::Classifier,
            fan_in,
            self.class_count,
        );
        push_linear("dis1".into(), Group::Discriminator, latent, self.discriminator_hidden);
        push_linear("dis2".into(), Group::Discriminator, self.discriminator_hidden, 2);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// The three networks and their parameter registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Tape handles for every parameter of a bundle, in registry order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ModelBundle {
    /// He-initialized weights and zero biases drawn from the `init` stream
    /// of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, group, shape)| {
                let value = if shape.len() == 2 {
                    he_weight(shape[0], shape[1], &mut rng)
                } else {
                    Tensor::zeros(shape)
                };
                let grad = vec![0.0; value.numel()];
                Param {
                    name,
                    group,
                    value,
                    grad,
                }
            })
            .collect();
        Ok(ModelBundle { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param>) -> Self {
        ModelBundle { config, params }
    }

    pub(crate) fn expected_layout(config: &ModelConfig) -> Result<Vec<(String, Group, Vec<usize>)>> {
        config.validate()?;
        Ok(config.layout())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// FNV-1a hash over the bit patterns of the parameters of `groups`.
    pub fn fingerprint(&self, groups: &[Group]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            for v in p.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Records every parameter on `tape`; those in `trainable` groups
    /// require grad, the rest are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable.contains(&p.group)))
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of parameters in `groups` into their slots.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound, groups: &[Group]) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if !groups.contains(&p.group) {
                continue;
            }
            if let Some(g) = tape.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    fn layer(&self, bound: &Bound, prefix: &str) -> (Var, Var) {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == format!("{prefix}.weight"))
            .unwrap_or_else(|| panic!("missing layer {prefix}"));
        (bound.vars[idx], bound.vars[idx + 1])
    }

    fn dense(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let (w, b) = self.layer(bound, prefix);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }

    /// Latent vectors `[B, latent]` for a batch `[B, N, 3]`.
    pub fn extract(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape {
                op: "extract",
                lhs: s,
                rhs: vec![0, 0, 3],
            });
        }
        let (b, n) = (s[0], s[1]);
        let layers = self.config.point_widths.len();
        let mut h = tape.reshape(x, &[b * n, 3])?;
        for i in 1..layers {
            let z = self.dense(tape, bound, &format!("point{i}"), h)?;
            h = tape.relu(z);
        }
        let k = tape.shape(h)[1];
        let cube = tape.reshape(h, &[b, n, k])?;
        let (w, bias) = self.layer(bound, &format!("point{layers}"));
        let pooled = tape.linear_max_pool(cube, w)?;
        tape.add_bias(pooled, bias)
    }

    /// Class logits `[B, C]` from latents.
    pub fn classifier_logits(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let hidden = self.config.classifier_widths.len();
        let mut h = z;
        for i in 1..=hidden {
            let a = self.dense(tape, bound, &format!("fc{i}"), h)?;
            h = tape.relu(a);
        }
        self.dense(tape, bound, &format!("fc{}", hidden + 1), h)
    }

    /// Class log-probabilities `[B, C]` from latents.
    pub fn classify_on(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let logits = self.classifier_logits(tape, bound, z)?;
        tape.log_softmax(logits)
    }

    /// Discriminator logits `[B, 2]`; column 0 is "real", column 1 "adversarial".
    pub fn discriminator_logits(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let a = self.dense(tape, bound, "dis1", z)?;
        let h = tape.relu(a);
        self.dense(tape, bound, "dis2", h)
    }

    fn check_latent(&self, latent: &Tensor) -> Result<()> {
        let s = latent.shape();
        if s.len() != 2 || s[1] != self.config.latent_dim() {
            return Err(Error::Shape {
                op: "latent",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.latent_dim()],
            });
        }
        if !latent.all_finite() {
            return Err(Error::Numerical("latent contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn extract_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let x = tape.constant(batch.clone());
        let z = self.extract(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }

    pub fn classify(&self, latent: &Tensor) -> Result<Tensor> {
        self.check_latent(latent)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let z = tape.constant(latent.clone());
        let lp = self.classify_on(&mut tape, &bound, z)?;
        Ok(tape.value(lp).clone())
    }

    pub fn discriminate(&self, latent: &Tensor) -> Result<Tensor> {
        self.check_latent(latent)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let z = tape.constant(latent.clone());
        let logits = self.discriminator_logits(&mut tape, &bound, z)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Class log-probabilities for a batch `[B, N, 3]`.
    pub fn log_probs(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        let x = tape.constant(batch.clone());
        let z = self.extract(&mut tape, &bound, x)?;
        let lp = self.classify_on(&mut tape, &bound, z)?;
        Ok(tape.value(lp).clone())
    }

    /// The `k` most probable classes per cloud, most probable first.
    pub fn predict_topk(&self, batch: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
        check_k(k, self.class_count())?;
        let lp = self.log_probs(batch)?;
        let c = self.class_count();
        Ok(lp.data().chunks_exact(c).map(|row| top_k(row, k)).collect())
    }
}

pub(crate) fn check_k(k: usize, classes: usize) -> Result<()> {
    if k == 0 || k > classes {
        return Err(Error::config(format!("k must lie in [1, {classes}], got {k}")));
    }
    Ok(())
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
