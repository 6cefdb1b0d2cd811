//! Losses, the two-phase adversarial training loop and the Adam optimizer.
//!
//! Phase 1 trains the text encoder and the three main-module stages against
//! the stage discriminators; phase 2 freezes both and trains the TRDCM
//! against its own discriminator. Each training pair is a canvas whose
//! target object may have been recolored, the caption of the original
//! scene, and the original canvas as the target.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use segedit_core::backend::Backends;
use segedit_core::image::{ImageBuffer, MaskMap};
use segedit_core::instruction::parse_instruction;
use segedit_core::par;
use segedit_core::preproc::prepare_canvas;
use segedit_core::synth::{caption_for, SynthSample, COLORS};
use segedit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{save_checkpoint, write_atomic};
use crate::model::{
    init_discriminator, init_generator, instruction_token_ids, CanvasInputs, DiscriminatorWeights, GeneratorWeights,
    ModelConfig, Net, Trainable,
};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CSV_HEADER: &str = "epoch,l_adv,l_per,l_cor,l_damsm,l_reg,l_g,l_d";
pub const CHECKPOINT_FILE: &str = "weights.segw";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adv: f64,
    pub per: f64,
    pub cor: f64,
    pub damsm: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            per: 1.0,
            cor: 1.0,
            damsm: 1.0,
            reg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_main: usize,
    pub epochs_trdcm: usize,
    pub loss_weights: LossWeights,
    pub working_size: usize,
    /// Probability that a training pair's input object is recolored away
    /// from its caption color.
    pub recolor_probability: f64,
    pub residual_blocks: usize,
    /// Synthetic dataset used by the CLI.
    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 2e-4,
            batch_size: 16,
            epochs_main: 30,
            epochs_trdcm: 10,
            loss_weights: LossWeights::default(),
            working_size: 32,
            recolor_probability: 0.5,
            residual_blocks: 2,
            dataset_size: 500,
            dataset_seed: 0,
            image_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if [w.adv, w.per, w.cor, w.damsm, w.reg].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Parameter("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.recolor_probability) {
            return Err(Error::Parameter("recolor probability must lie in [0, 1]".into()));
        }
        if self.dataset_size == 0 || self.image_size < 16 {
            return Err(Error::Parameter("dataset needs at least one image of side 16 or more".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            working_size: self.working_size,
            residual_blocks: self.residual_blocks,
            ..ModelConfig::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_main + self.epochs_trdcm
    }
}

/// Loss values of one epoch (averaged over its samples). `l_cor` is the
/// correlation score of generated images with their own captions, so the
/// generator objective contains `1 − l_cor`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLosses {
    pub l_adv: f64,
    pub l_per: f64,
    pub l_cor: f64,
    pub l_damsm: f64,
    pub l_reg: f64,
    pub l_g: f64,
    pub l_d: f64,
}

impl TrainingLosses {
    fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("l_adv", self.l_adv),
            ("l_per", self.l_per),
            ("l_cor", self.l_cor),
            ("l_damsm", self.l_damsm),
            ("l_reg", self.l_reg),
            ("l_g", self.l_g),
            ("l_d", self.l_d),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }

    fn mean(items: &[TrainingLosses]) -> TrainingLosses {
        let n = items.len().max(1) as f64;
        let mut m = TrainingLosses::default();
        for l in items {
            m.l_adv += l.l_adv;
            m.l_per += l.l_per;
            m.l_cor += l.l_cor;
            m.l_damsm += l.l_damsm;
            m.l_reg += l.l_reg;
            m.l_g += l.l_g;
            m.l_d += l.l_d;
        }
        TrainingLosses {
            l_adv: m.l_adv / n,
            l_per: m.l_per / n,
            l_cor: m.l_cor / n,
            l_damsm: m.l_damsm / n,
            l_reg: m.l_reg / n,
            l_g: m.l_g / n,
            l_d: m.l_d / n,
        }
    }
}

/// Generator loss components before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms {
    pub adv: f64,
    pub per: f64,
    pub cor: f64,
    pub damsm: f64,
    pub reg: f64,
}

fn finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            component: component.into(),
            detail: format!("non-finite value {v}"),
        })
    }
}

/// `1 − mean|edited − original|` over all channels and pixels.
pub fn loss_reg(edited: &ImageBuffer, original: &ImageBuffer) -> Result<f64> {
    if edited.dims() != original.dims() || edited.channels() != original.channels() {
        return Err(Error::Shape(format!("images {:?} vs {:?}", edited.dims(), original.dims())));
    }
    let sum: f64 = edited.data().iter().zip(original.data()).map(|(a, b)| (a - b).abs()).sum();
    finite("l_reg", 1.0 - sum / edited.data().len() as f64)
}

/// `w_adv·adv + w_per·per + w_cor·(1 − cor) + w_damsm·damsm + w_reg·reg`.
pub fn loss_generator(t: &GeneratorTerms, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_adv", t.adv), ("l_per", t.per), ("l_cor", t.cor), ("l_damsm", t.damsm), ("l_reg", t.reg)] {
        finite(name, v)?;
    }
    Ok(w.adv * t.adv + w.per * t.per + w.cor * (1.0 - t.cor) + w.damsm * t.damsm + w.reg * t.reg)
}

/// `adv + (1 − cor_matched) + cor_mismatched`.
pub fn loss_discriminator(l_adv: f64, cor_matched: f64, cor_mismatched: f64) -> Result<f64> {
    finite("l_adv", l_adv)?;
    for (name, v) in [("cor_matched", cor_matched), ("cor_mismatched", cor_mismatched)] {
        finite(name, v)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    Ok(l_adv + (1.0 - cor_matched) + cor_mismatched)
}

/// A uniformly random cyclic permutation (Sattolo's algorithm): for
/// `n ≥ 2` no index maps to itself.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Adam with per-tensor step counts, so tensors that start training late get
/// their own bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>, i32)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let (m, v, t) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()], 0));
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t);
            let c2 = 1.0 - self.beta2.powi(*t);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p.data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Main,
    Trdcm,
}

impl Phase {
    fn trainable(self) -> &'static [&'static str] {
        match self {
            Phase::Main => &["text.", "main."],
            Phase::Trdcm => &["trdcm."],
        }
    }
}

/// One training example at working resolution.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub input: ImageBuffer,
    pub mask: MaskMap,
    pub target: ImageBuffer,
    pub token_ids: Vec<usize>,
    pub mismatch_ids: Vec<usize>,
    pub noise: Vec<f64>,
}

struct SampleOutcome {
    g_grads: BTreeMap<String, Vec<f64>>,
    d_grads: BTreeMap<String, Vec<f64>>,
    losses: TrainingLosses,
}

fn weighted(g: &mut Graph, terms: [(Var, f64); 5]) -> Var {
    let mut acc: Option<Var> = None;
    for (v, w) in terms {
        let s = g.scale(v, w);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.expect("five terms")
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = g.add(acc, *v);
    }
    g.scale(acc, 1.0 / vars.len() as f64)
}

fn image_tensor(image: &ImageBuffer) -> Tensor {
    Tensor {
        shape: vec![image.height(), image.width(), image.channels()],
        data: image.data().to_vec(),
    }
}

/// Forward and backward passes of both players for one pair.
fn sample_step(phase: Phase, gen: &GeneratorWeights, disc: &DiscriminatorWeights, w: &LossWeights, pair: &TrainingPair) -> SampleOutcome {
    let gnet = Net::new(&gen.params, Trainable::Prefixes(phase.trainable()));
    let dnet = Net::frozen(&disc.params);
    let mut g = Graph::new();
    let (tv, ti) = gnet.text(&mut g, &pair.token_ids);
    let inputs = CanvasInputs::build(&mut g, &gnet, &pair.input, &pair.mask);
    let z = g.constant(Tensor {
        shape: vec![1, pair.noise.len()],
        data: pair.noise.clone(),
    });
    let (h_last, stage_imgs) = gnet.main_module(&mut g, &inputs, ti, z);
    let t2 = g.constant(image_tensor(&pair.target));
    let t1 = g.avgpool2(t2);
    let t0 = g.avgpool2(t1);
    let ti_d = g.detach(ti);

    // (fake, real, canvas, discriminator index)
    let stages: Vec<(Var, Var, Var, usize)> = match phase {
        Phase::Main => vec![
            (stage_imgs[0], t0, inputs.canvases[0], 0),
            (stage_imgs[1], t1, inputs.canvases[1], 1),
            (stage_imgs[2], t2, inputs.canvases[2], 2),
        ],
        Phase::Trdcm => {
            let out = gnet.trdcm(
                &mut g,
                h_last,
                tv,
                ti,
                inputs.features[0],
                inputs.canvases[2],
                &inputs.masks[2],
                gen.config.residual_blocks,
            );
            vec![(out, t2, inputs.canvases[2], 3)]
        }
    };

    let (mut adv, mut per, mut cor, mut reg) = (vec![], vec![], vec![], vec![]);
    let mut last_e3 = None;
    for &(fake, real, canvas, k) in &stages {
        let (logit, c) = dnet.discriminate(&mut g, fake, ti_d, k);
        let neg = g.scale(logit, -1.0);
        let sp = g.softplus(neg);
        adv.push(g.sum_all(sp));
        cor.push(g.sum_all(c));
        let [f1, f2, f3] = gnet.encode_image(&mut g, fake);
        let [r1, r2, _] = gnet.encode_image(&mut g, real);
        let mut parts = vec![];
        for (f, r) in [(f1, r1), (f2, r2)] {
            let d = g.sub(f, r);
            let sq = g.square(d);
            parts.push(g.mean_all(sq));
        }
        per.push(g.add(parts[0], parts[1]));
        let d = g.sub(fake, canvas);
        let a = g.abs(d);
        let m = g.mean_all(a);
        reg.push(g.one_minus(m));
        last_e3 = Some(f3);
    }
    let adv = mean_of(&mut g, &adv);
    let per = mean_of(&mut g, &per);
    let cor = mean_of(&mut g, &cor);
    let reg = mean_of(&mut g, &reg);
    // DAMSM also shapes the word embeddings used by the attention.
    let damsm = gnet.damsm(&mut g, last_e3.expect("at least one stage"), tv);
    let anti_cor = g.one_minus(cor);
    let l_g = weighted(&mut g, [(adv, w.adv), (per, w.per), (anti_cor, w.cor), (damsm, w.damsm), (reg, w.reg)]);
    let g_grads = g.backward(l_g).params(&g);

    // Discriminator on detached fakes, real targets, matched and mismatched
    // captions.
    let fakes: Vec<(Tensor, Tensor, usize)> = stages
        .iter()
        .map(|&(f, r, _, k)| (g.value(f).clone(), g.value(r).clone(), k))
        .collect();
    let ti_val = g.value(ti).clone();
    let dnet = Net::new(&disc.params, Trainable::All);
    let mut dg = Graph::new();
    let ti = dg.constant(ti_val);
    let (_, ti_mis) = Net::frozen(&gen.params).text(&mut dg, &pair.mismatch_ids);
    let mut d_terms = vec![];
    let mut d_value = 0.0;
    for (fake, real, k) in fakes {
        let real = dg.constant(real);
        let fake = dg.constant(fake);
        let (lr, cr) = dnet.discriminate(&mut dg, real, ti, k);
        let (lf, _) = dnet.discriminate(&mut dg, fake, ti, k);
        let (_, cm) = dnet.discriminate(&mut dg, real, ti_mis, k);
        let nr = dg.scale(lr, -1.0);
        let a = dg.softplus(nr);
        let b = dg.softplus(lf);
        let adv_d = dg.add(a, b);
        let ncr = dg.one_minus(cr);
        let s = dg.add(adv_d, ncr);
        let s = dg.add(s, cm);
        let s = dg.sum_all(s);
        d_value += loss_discriminator(dg.scalar(adv_d), dg.scalar(cr), dg.scalar(cm)).unwrap_or(f64::NAN);
        d_terms.push(s);
    }
    let n_d = d_terms.len() as f64;
    let l_d = mean_of(&mut dg, &d_terms);
    let d_grads = dg.backward(l_d).params(&dg);

    let terms = GeneratorTerms {
        adv: g.scalar(adv),
        per: g.scalar(per),
        cor: g.scalar(cor),
        damsm: g.scalar(damsm),
        reg: g.scalar(reg),
    };
    let losses = TrainingLosses {
        l_adv: terms.adv,
        l_per: terms.per,
        l_cor: terms.cor,
        l_damsm: terms.damsm,
        l_reg: terms.reg,
        l_g: loss_generator(&terms, w).unwrap_or(f64::NAN),
        l_d: d_value / n_d,
    };
    SampleOutcome { g_grads, d_grads, losses }
}

/// Token ids and shape/color of each sample's caption.
struct CaptionInfo {
    ids: Vec<usize>,
    caption: String,
    shape: segedit_core::synth::ShapeKind,
    color: usize,
}

fn caption_info(s: &SynthSample) -> Result<CaptionInfo> {
    let ids = instruction_token_ids(&parse_instruction(&s.caption)?)?;
    Ok(CaptionInfo {
        ids,
        caption: s.caption.clone(),
        shape: s.target().shape,
        color: s.target().color,
    })
}

/// Mismatched caption for batch position `i`: follow the derangement cycle
/// to the first caption whose text differs, else use the same shape with
/// another color.
fn mismatch_for(i: usize, batch: &[usize], perm: &[usize], infos: &[CaptionInfo]) -> Result<Vec<usize>> {
    let own = &infos[batch[i]];
    let mut j = perm[i];
    for _ in 0..batch.len() {
        if j == i {
            break;
        }
        let other = &infos[batch[j]];
        if other.caption != own.caption {
            return Ok(other.ids.clone());
        }
        j = perm[j];
    }
    let text = caption_for(own.shape, (own.color + 1) % COLORS.len());
    instruction_token_ids(&parse_instruction(&text)?)
}

fn pair_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa076_1d64_78bd_642f_u64.wrapping_mul(epoch as u64 + 1));
    rng.set_stream(index as u64 + 1);
    rng
}

/// Builds the training pair for `sample` in a given epoch.
pub fn make_pair(
    sample: &SynthSample,
    token_ids: Vec<usize>,
    mismatch_ids: Vec<usize>,
    config: &TrainConfig,
    backends: &Backends,
    rng: &mut impl Rng,
) -> Result<TrainingPair> {
    let mask = sample.target_mask();
    let target = prepare_canvas(&sample.image, &mask, backends, config.working_size)?;
    let input = if rng.gen_bool(config.recolor_probability) {
        let color = (sample.target().color + 1 + rng.gen_range(0..COLORS.len() - 1)) % COLORS.len();
        let (img, _) = sample.scene.with_color(sample.target_index, color).render();
        prepare_canvas(&img, &mask, backends, config.working_size)?.image
    } else {
        target.image.clone()
    };
    let noise = (0..config.model_config().noise_dim).map(|_| StandardNormal.sample(rng)).collect();
    Ok(TrainingPair {
        input,
        mask: target.mask,
        target: target.image,
        token_ids,
        mismatch_ids,
        noise,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub generator: GeneratorWeights,
    pub discriminator: DiscriminatorWeights,
    pub history: Vec<TrainingLosses>,
}

/// Called after every epoch with its 1-based number, phase and losses.
pub type EpochCallback<'a> = &'a mut dyn FnMut(usize, Phase, &TrainingLosses);

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory receiving `weights.segw` and `train_log.csv`, rewritten
    /// atomically after every epoch.
    pub out_dir: Option<PathBuf>,
    pub on_epoch: Option<EpochCallback<'a>>,
}

pub fn csv_log(history: &[TrainingLosses]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (i, l) in history.iter().enumerate() {
        let _ = write!(s, "{}", i + 1);
        for (_, v) in l.fields() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn persist(dir: &Path, gen: &GeneratorWeights, disc: &DiscriminatorWeights, history: &[TrainingLosses], config: &TrainConfig) -> Result<()> {
    let meta = json!({ "epochs_completed": history.len(), "train_config": config });
    save_checkpoint(dir.join(CHECKPOINT_FILE), gen, Some(disc), meta)?;
    write_atomic(&dir.join(LOG_FILE), csv_log(history).as_bytes())
}

pub fn train(config: &TrainConfig, dataset: &[SynthSample], gen: GeneratorWeights, disc: DiscriminatorWeights) -> Result<TrainOutput> {
    train_with(config, dataset, gen, disc, TrainOptions::default())
}

/// Fresh weights for a config.
pub fn init_weights(config: &TrainConfig) -> Result<(GeneratorWeights, DiscriminatorWeights)> {
    let mc = config.model_config();
    Ok((init_generator(&mc, config.seed)?, init_discriminator(&mc, config.seed)?))
}

fn grads_finite(grads: &BTreeMap<String, Vec<f64>>) -> bool {
    grads.values().all(|g| g.iter().all(|v| v.is_finite()))
}

fn add_grads(acc: &mut BTreeMap<String, Vec<f64>>, grads: BTreeMap<String, Vec<f64>>) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

fn scale_grads(grads: &mut BTreeMap<String, Vec<f64>>, s: f64) {
    grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
}

pub fn train_with(
    config: &TrainConfig,
    dataset: &[SynthSample],
    mut gen: GeneratorWeights,
    mut disc: DiscriminatorWeights,
    mut options: TrainOptions,
) -> Result<TrainOutput> {
    config.validate()?;
    let mc = config.model_config();
    if gen.config != mc || disc.config != mc {
        return Err(Error::Parameter("weights were built for a different model config".into()));
    }
    if dataset.is_empty() && config.total_epochs() > 0 {
        return Err(Error::Parameter("training needs a nonempty dataset".into()));
    }
    let infos: Vec<CaptionInfo> = dataset.iter().map(caption_info).collect::<Result<_>>()?;
    let backends = Backends::toy();
    let mut history = Vec::new();
    if let Some(dir) = &options.out_dir {
        persist(dir, &gen, &disc, &history, config)?;
    }
    let mut g_opt = Adam::new(config.learning_rate);
    let mut d_opt = Adam::new(config.learning_rate);
    let phases = std::iter::repeat_n(Phase::Main, config.epochs_main).chain(std::iter::repeat_n(Phase::Trdcm, config.epochs_trdcm));
    for (epoch, phase) in phases.enumerate() {
        if phase == Phase::Trdcm && epoch == config.epochs_main && config.epochs_main > 0 {
            warm_start_trdcm_discriminator(&mut disc.params);
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut epoch_rng = pair_rng(config.seed, epoch, 0);
        order.shuffle(&mut epoch_rng);
        let mut epoch_losses = Vec::with_capacity(dataset.len());
        for batch in order.chunks(config.batch_size) {
            let perm = derangement(batch.len(), &mut epoch_rng);
            let pairs: Vec<TrainingPair> = (0..batch.len())
                .map(|i| {
                    let idx = batch[i];
                    let mismatch = mismatch_for(i, batch, &perm, &infos)?;
                    let mut rng = pair_rng(config.seed, epoch, idx + 1);
                    make_pair(&dataset[idx], infos[idx].ids.clone(), mismatch, config, &backends, &mut rng)
                })
                .collect::<Result<_>>()?;
            let outcomes = par::map_slice(&pairs, |p| sample_step(phase, &gen, &disc, &config.loss_weights, p));
            let mut g_acc = BTreeMap::new();
            let mut d_acc = BTreeMap::new();
            for o in outcomes {
                if !o.losses.is_finite() || !grads_finite(&o.g_grads) || !grads_finite(&o.d_grads) {
                    return Err(abort(&options, epoch + 1, &o.losses));
                }
                epoch_losses.push(o.losses);
                add_grads(&mut g_acc, o.g_grads);
                add_grads(&mut d_acc, o.d_grads);
            }
            let inv = 1.0 / batch.len() as f64;
            scale_grads(&mut g_acc, inv);
            scale_grads(&mut d_acc, inv);
            g_opt.step(&mut gen.params, &g_acc);
            d_opt.step(&mut disc.params, &d_acc);
            if !gen.params.is_finite() || !disc.params.is_finite() {
                return Err(abort(&options, epoch + 1, &TrainingLosses::default()));
            }
        }
        let mean = TrainingLosses::mean(&epoch_losses);
        history.push(mean);
        if let Some(dir) = &options.out_dir {
            persist(dir, &gen, &disc, &history, config)?;
        }
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(epoch + 1, phase, &mean);
        }
    }
    Ok(TrainOutput {
        generator: gen,
        discriminator: disc,
        history,
    })
}

/// The TRDCM output has the final stage's resolution, so its discriminator
/// starts from the one trained on stage-3 images.
fn warm_start_trdcm_discriminator(params: &mut ParamStore) {
    let copies: Vec<(String, Tensor)> = params
        .subset("disc.d2.")
        .iter()
        .map(|(k, t)| (k.replacen("disc.d2.", "disc.d3.", 1), t.clone()))
        .collect();
    for (k, t) in copies {
        params.insert(k, t);
    }
}

fn abort(options: &TrainOptions, epoch: usize, losses: &TrainingLosses) -> Error {
    let saved = options
        .out_dir
        .as_ref()
        .map(|d| format!("; last good checkpoint: {}", d.join(CHECKPOINT_FILE).display()))
        .unwrap_or_default();
    Error::Numeric {
        component: "training".into(),
        detail: format!("non-finite loss or gradient in epoch {epoch} ({losses:?}){saved}"),
    }
}
