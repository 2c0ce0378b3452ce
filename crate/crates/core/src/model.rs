//! The two-branch re-identification network with its train-only heads.
//!
//! ```text
//! x ─ B1 ─┬─ B2 ─┬─ BOT3 ─ BOT4 ─ pool ─ f_bot ─ {id_bot, gender}
//!         │      └─ CAL3 ─ CAL4 ─ pool ─ f_cal ─ {id_cal, clothes}
//!         └─ POSE2 ─ POSE3 ─ POSE4 ─ pool ─ f_pose ─ {pose}
//! ```
//!
//! Every block is dense + relu. Pooling views a branch's final activation as
//! `G` groups and concatenates the per-group max and mean.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::losses::{BranchFeatures, HeadLogits, LinearHead};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Parameterized layers in declaration (and checkpoint) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    B1,
    B2,
    Bot3,
    Bot4,
    Cal3,
    Cal4,
    Pose2,
    Pose3,
    Pose4,
    IdBot,
    IdCal,
    Clothes,
    Gender,
    PoseCls,
}

impl Layer {
    pub const ALL: [Layer; 14] = [
        Layer::B1,
        Layer::B2,
        Layer::Bot3,
        Layer::Bot4,
        Layer::Cal3,
        Layer::Cal4,
        Layer::Pose2,
        Layer::Pose3,
        Layer::Pose4,
        Layer::IdBot,
        Layer::IdCal,
        Layer::Clothes,
        Layer::Gender,
        Layer::PoseCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::B1 => "backbone.b1",
            Layer::B2 => "backbone.b2",
            Layer::Bot3 => "bot.b3",
            Layer::Bot4 => "bot.b4",
            Layer::Cal3 => "cal.b3",
            Layer::Cal4 => "cal.b4",
            Layer::Pose2 => "pose.b2",
            Layer::Pose3 => "pose.b3",
            Layer::Pose4 => "pose.b4",
            Layer::IdBot => "classifier.id_bot",
            Layer::IdCal => "classifier.id_cal",
            Layer::Clothes => "classifier.clothes",
            Layer::Gender => "classifier.gender",
            Layer::PoseCls => "classifier.pose",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_classifier(self) -> bool {
        self >= Layer::IdBot
    }
}

/// Per-channel input normalization applied to `[0, 1]` pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Channel statistics over a set of images.
    pub fn fit(images: &[&Image]) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0.0;
        for img in images {
            for px in img.data().chunks(3) {
                for c in 0..3 {
                    let v = px[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self::default();
        for c in 0..3 {
            out.mean[c] = sum[c] / n;
            let var = (sq[c] / n - out.mean[c] * out.mean[c]).max(1e-6);
            out.std[c] = crate::math::sqrt(var);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub branch: usize,
    pub groups: usize,
    pub num_ids: usize,
    pub num_clothes: usize,
    pub num_pose_classes: usize,
    pub normalization: Normalization,
}

impl ModelConfig {
    pub fn new(num_ids: usize, num_clothes: usize, num_pose_classes: usize) -> Self {
        Self {
            height: 64,
            width: 32,
            hidden1: 512,
            hidden2: 256,
            branch: 256,
            groups: 64,
            num_ids,
            num_clothes,
            num_pose_classes,
            normalization: Normalization::default(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width * 3
    }

    /// Width of one pooled branch feature.
    pub fn feature_dim(&self) -> usize {
        2 * self.groups
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.feature_dim()
    }

    /// `(fan_in, fan_out)` of a layer.
    pub fn layer_shape(&self, layer: Layer) -> (usize, usize) {
        let f = self.feature_dim();
        match layer {
            Layer::B1 => (self.input_dim(), self.hidden1),
            Layer::B2 | Layer::Pose2 => (self.hidden1, self.hidden2),
            Layer::Bot3 | Layer::Cal3 | Layer::Pose3 => (self.hidden2, self.branch),
            Layer::Bot4 | Layer::Cal4 | Layer::Pose4 => (self.branch, self.branch),
            Layer::IdBot | Layer::IdCal => (f, self.num_ids),
            Layer::Clothes => (f, self.num_clothes),
            Layer::Gender => (f, 2),
            Layer::PoseCls => (f, self.num_pose_classes),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.branch % self.groups != 0 {
            return Err(TensorError::BadGrouping {
                width: self.branch,
                groups: self.groups,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// He-normal hidden layers, small-normal classifiers, zero biases.
    /// The CAL blocks start as copies of the BOT blocks; the POSE branch is
    /// drawn independently.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<LayerParams> = Vec::with_capacity(Layer::ALL.len());
        for layer in Layer::ALL {
            let (fan_in, fan_out) = config.layer_shape(layer);
            let copy_of = match layer {
                Layer::Cal3 => Some(Layer::Bot3),
                Layer::Cal4 => Some(Layer::Bot4),
                _ => None,
            };
            if let Some(src) = copy_of {
                let p = layers[src.index()].clone();
                layers.push(p);
                continue;
            }
            let std = if layer.is_classifier() {
                0.01
            } else {
                crate::math::sqrt(2.0 / fan_in as f64)
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = (0..fan_in * fan_out)
                .map(|_| normal.sample(&mut rng))
                .collect();
            layers.push(LayerParams {
                weight: Tensor::new(&[fan_in, fan_out], w)?,
                bias: Tensor::zeros(&[1, fan_out]),
                frozen: false,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn layer(&self, l: Layer) -> &LayerParams {
        &self.layers[l.index()]
    }

    pub fn layer_mut(&mut self, l: Layer) -> &mut LayerParams {
        &mut self.layers[l.index()]
    }

    /// Deep copy with every group frozen.
    pub fn clone_frozen(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.frozen = true;
        }
        out
    }

    pub fn all_frozen(&self) -> bool {
        self.layers.iter().all(|l| l.frozen)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers every layer on the tape, borrowing the tensors. Frozen
    /// layers are bound without gradient tracking.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        let heads = self
            .layers
            .iter()
            .map(|l| LinearHead {
                weight: g.param(&l.weight, !l.frozen),
                bias: g.param(&l.bias, !l.frozen),
            })
            .collect();
        Bound { heads }
    }

    /// Flattens and normalizes images into a `B × input_dim` tensor.
    pub fn input_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let c = &self.config;
        let dim = c.input_dim();
        let mut data = Vec::with_capacity(images.len() * dim);
        for img in images {
            if img.height() != c.height || img.width() != c.width {
                return Err(TensorError::ShapeMismatch {
                    op: "input_tensor",
                    lhs: vec![img.height(), img.width()],
                    rhs: vec![c.height, c.width],
                });
            }
            for px in img.data().chunks(3) {
                for ch in 0..3 {
                    let v = px[ch] as f64 / 255.0;
                    data.push((v - c.normalization.mean[ch]) / c.normalization.std[ch]);
                }
            }
        }
        Tensor::new(&[images.len(), dim], data)
    }

    /// Unit-normalized `[f_bot, f_cal]` rows for a batch of images. Only the
    /// backbone and the two re-identification branches run.
    pub fn embed(&self, images: &[&Image]) -> Result<Tensor> {
        let x = self.input_tensor(images)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.constant(x);
        let (bot, cal) = bound.reid_features(&mut g, self.config.groups, xv)?;
        let cat = g.concat_cols(&[bot, cal])?;
        let out = g.l2_normalize(cat)?;
        Ok(g.value(out).clone())
    }

    /// Embedding of a single image.
    pub fn inference_embedding(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.embed(&[image])?.into_data())
    }
}

/// Layer handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    heads: Vec<LinearHead>,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub f_bot: Var,
    pub f_cal: Var,
    pub f_pose: Option<Var>,
    pub id_bot: Var,
    pub id_cal: Var,
    pub clothes: Var,
    pub gender: Var,
    pub pose: Option<Var>,
}

impl Forward {
    /// L2-normalized CAL and BOT features.
    pub fn normalized(&self, g: &mut Graph<'_>) -> Result<BranchFeatures> {
        Ok(BranchFeatures {
            cal: g.l2_normalize(self.f_cal)?,
            bot: g.l2_normalize(self.f_bot)?,
        })
    }

    pub fn head_logits(&self) -> HeadLogits {
        HeadLogits {
            cal_clothes: self.clothes,
            cal_id: self.id_cal,
            bot_id: self.id_bot,
        }
    }
}

impl Bound {
    pub fn head(&self, l: Layer) -> LinearHead {
        self.heads[l.index()]
    }

    pub fn var_pairs(&self) -> impl Iterator<Item = (Layer, LinearHead)> + '_ {
        Layer::ALL.iter().map(move |&l| (l, self.heads[l.index()]))
    }

    fn block(&self, g: &mut Graph<'_>, l: Layer, x: Var) -> Result<Var> {
        let y = self.heads[l.index()].apply(g, x)?;
        g.relu(y)
    }

    fn branch(&self, g: &mut Graph<'_>, layers: &[Layer], groups: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for &l in layers {
            h = self.block(g, l, h)?;
        }
        g.group_max_avg(h, groups)
    }

    fn reid_features(&self, g: &mut Graph<'_>, groups: usize, x: Var) -> Result<(Var, Var)> {
        let h1 = self.block(g, Layer::B1, x)?;
        let h2 = self.block(g, Layer::B2, h1)?;
        let bot = self.branch(g, &[Layer::Bot3, Layer::Bot4], groups, h2)?;
        let cal = self.branch(g, &[Layer::Cal3, Layer::Cal4], groups, h2)?;
        Ok((bot, cal))
    }

    /// Full forward. The POSE branch only runs when `with_pose` is set.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        config: &ModelConfig,
        x: Var,
        with_pose: bool,
    ) -> Result<Forward> {
        let (b, d) = g.value(x).dims2("forward")?;
        if d != config.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                lhs: vec![b, d],
                rhs: vec![b, config.input_dim()],
            });
        }
        let groups = config.groups;
        let h1 = self.block(g, Layer::B1, x)?;
        let h2 = self.block(g, Layer::B2, h1)?;
        let f_bot = self.branch(g, &[Layer::Bot3, Layer::Bot4], groups, h2)?;
        let f_cal = self.branch(g, &[Layer::Cal3, Layer::Cal4], groups, h2)?;
        let f_pose = if with_pose {
            Some(self.branch(g, &[Layer::Pose2, Layer::Pose3, Layer::Pose4], groups, h1)?)
        } else {
            None
        };
        let id_bot = self.head(Layer::IdBot).apply(g, f_bot)?;
        let id_cal = self.head(Layer::IdCal).apply(g, f_cal)?;
        let clothes = self.head(Layer::Clothes).apply(g, f_cal)?;
        let gender = self.head(Layer::Gender).apply(g, f_bot)?;
        let pose = match f_pose {
            Some(f) => Some(self.head(Layer::PoseCls).apply(g, f)?),
            None => None,
        };
        Ok(Forward {
            f_bot,
            f_cal,
            f_pose,
            id_bot,
            id_cal,
            clothes,
            gender,
            pose,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 8,
            hidden1: 24,
            hidden2: 16,
            branch: 16,
            groups: 4,
            num_ids: 5,
            num_clothes: 7,
            num_pose_classes: 4,
            normalization: Normalization::default(),
        }
    }

    fn random_images(n: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let data = (0..16 * 8 * 3).map(|_| rng.random::<u8>()).collect();
                Image::new(16, 8, data).unwrap()
            })
            .collect()
    }

    fn run(p: &ModelParams, imgs: &[Image], with_pose: bool) -> Vec<Tensor> {
        let refs: Vec<&Image> = imgs.iter().collect();
        let x = p.input_tensor(&refs).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let xv = g.constant(x);
        let f = bound.forward(&mut g, &p.config, xv, with_pose).unwrap();
        let mut out = vec![f.f_bot, f.f_cal, f.id_bot, f.id_cal, f.clothes, f.gender];
        out.extend(f.f_pose);
        out.extend(f.pose);
        out.iter().map(|&v| g.value(v).clone()).collect()
    }

    #[test]
    fn default_dimensions() {
        let c = ModelConfig::new(20, 80, 16);
        assert_eq!(c.input_dim(), 6144);
        assert_eq!(c.feature_dim(), 128);
        assert_eq!(c.embedding_dim(), 256);
    }

    #[test]
    fn zero_input_gives_finite_valid_outputs() {
        let p = ModelParams::init(small_config(), 1).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 16 * 8 * 3]));
        let f = bound.forward(&mut g, &p.config, x, true).unwrap();
        for v in [f.id_bot, f.id_cal, f.clothes, f.gender, f.pose.unwrap()] {
            let s = g.softmax(v).unwrap();
            let total: f64 = g.value(s).data().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.value(f.f_bot).shape(), &[1, 8]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::init(small_config(), 1).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 10]));
        assert!(bound.forward(&mut g, &p.config, x, false).is_err());
    }

    #[test]
    fn duplicated_sample_duplicates_outputs() {
        let p = ModelParams::init(small_config(), 2).unwrap();
        let imgs = random_images(3, 5);
        let dup = vec![
            imgs[0].clone(),
            imgs[1].clone(),
            imgs[0].clone(),
            imgs[2].clone(),
        ];
        for t in run(&p, &dup, true) {
            assert_eq!(t.row(0), t.row(2));
        }
    }

    #[test]
    fn embedding_is_unit_and_deterministic() {
        let p = ModelParams::init(small_config(), 3).unwrap();
        let img = &random_images(1, 9)[0];
        let a = p.inference_embedding(img).unwrap();
        let b = p.inference_embedding(img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), p.config.embedding_dim());
        let n: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn branches_start_as_copies() {
        let p = ModelParams::init(small_config(), 4).unwrap();
        assert_eq!(p.layer(Layer::Bot3), p.layer(Layer::Cal3));
        assert_eq!(p.layer(Layer::Bot4), p.layer(Layer::Cal4));
        assert_ne!(p.layer(Layer::B2), p.layer(Layer::Pose2));
    }

    /// One Adam step on a loss that touches only the BOT head.
    fn bot_only_step(p: &mut ModelParams, imgs: &[Image]) {
        let refs: Vec<&Image> = imgs.iter().collect();
        let x = p.input_tensor(&refs).unwrap();
        let grads = {
            let mut g = Graph::new();
            let bound = p.bind(&mut g);
            let xv = g.constant(x);
            let f = bound.forward(&mut g, &p.config, xv, false).unwrap();
            let l = g.sum(f.id_bot).unwrap();
            g.backward(l).unwrap();
            crate::optim::collect_grads(&mut g, &bound)
        };
        let mut opt = Adam::new(p, 1e-2);
        opt.step(p, &grads, 1e-2);
    }

    #[test]
    fn shared_backbone_couples_branches() {
        let mut p = ModelParams::init(small_config(), 6).unwrap();
        let imgs = random_images(4, 7);
        let before = p.clone();
        let cal_before = run(&p, &imgs, false)[1].clone();
        bot_only_step(&mut p, &imgs);
        assert_ne!(p.layer(Layer::B1), before.layer(Layer::B1));
        assert_ne!(p.layer(Layer::B2), before.layer(Layer::B2));
        assert_ne!(p.layer(Layer::Bot4), before.layer(Layer::Bot4));
        for l in [
            Layer::Cal3,
            Layer::Cal4,
            Layer::IdCal,
            Layer::Clothes,
            Layer::Pose2,
        ] {
            assert_eq!(p.layer(l), before.layer(l), "{}", l.name());
        }
        assert_ne!(run(&p, &imgs, false)[1], cal_before);
    }

    #[test]
    fn pose_gradient_stays_off_main_branch() {
        let p = ModelParams::init(small_config(), 8).unwrap();
        let imgs = random_images(4, 9);
        let refs: Vec<&Image> = imgs.iter().collect();
        let x = p.input_tensor(&refs).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let xv = g.constant(x);
        let f = bound.forward(&mut g, &p.config, xv, true).unwrap();
        let l = g.sum(f.pose.unwrap()).unwrap();
        g.backward(l).unwrap();
        for l in [
            Layer::B2,
            Layer::Bot3,
            Layer::Bot4,
            Layer::Cal3,
            Layer::Cal4,
        ] {
            assert!(g.grad(bound.head(l).weight).is_none(), "{}", l.name());
        }
        assert!(g.grad(bound.head(Layer::B1).weight).is_some());
        assert!(g.grad(bound.head(Layer::Pose2).weight).is_some());
    }

    #[test]
    fn pooling_is_permutation_invariant_within_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = Tensor::new(
            &[2, 16],
            (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut shuffled = t.clone();
        for row in shuffled.data_mut().chunks_mut(16) {
            for grp in row.chunks_mut(4) {
                grp.rotate_left(1);
                grp.swap(0, 2);
            }
        }
        let mut g = Graph::new();
        let a = g.constant(t);
        let b = g.constant(shuffled);
        let pa = g.group_max_avg(a, 4).unwrap();
        let pb = g.group_max_avg(b, 4).unwrap();
        // the mean of a reordered group may differ in the last ulp
        for (x, y) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_clone_is_immutable_under_training() {
        let p = ModelParams::init(small_config(), 11).unwrap();
        let mut teacher = p.clone_frozen();
        assert!(teacher.all_frozen());
        let sum = teacher.checksum();
        let imgs = random_images(4, 12);
        for _ in 0..100 {
            bot_only_step(&mut teacher, &imgs);
        }
        assert_eq!(teacher.checksum(), sum);
        assert_eq!(run(&teacher, &imgs, true), run(&p, &imgs, true));
    }

    #[test]
    fn student_single_sgd_step_matches_hand_update() {
        // Plain gradient step on one bias coordinate of the gender head:
        // d(sum of gender logits)/d(bias_k) = batch size.
        let p = ModelParams::init(small_config(), 13).unwrap();
        let teacher = p.clone_frozen();
        let mut student = p.clone();
        let imgs = random_images(3, 14);
        let refs: Vec<&Image> = imgs.iter().collect();
        let x = student.input_tensor(&refs).unwrap();
        let grad = {
            let mut g = Graph::new();
            let bound = student.bind(&mut g);
            let xv = g.constant(x);
            let f = bound.forward(&mut g, &student.config, xv, false).unwrap();
            let l = g.sum(f.gender).unwrap();
            g.backward(l).unwrap();
            g.grad(bound.head(Layer::Gender).bias).unwrap().clone()
        };
        assert_eq!(grad.data(), &[3.0, 3.0]);
        let lr = 0.1;
        for (b, gr) in student
            .layer_mut(Layer::Gender)
            .bias
            .data_mut()
            .iter_mut()
            .zip(grad.data())
        {
            *b -= lr * gr;
        }
        for &b in student.layer(Layer::Gender).bias.data() {
            assert!((b + 0.3).abs() < 1e-15);
        }
        assert_ne!(student.checksum(), teacher.checksum());
        let ts = run(&teacher, &imgs, false);
        let ss = run(&student, &imgs, false);
        for (a, b) in ts[5].data().iter().zip(ss[5].data()) {
            assert!((a - 0.3 - b).abs() < 1e-12);
        }
    }
}
