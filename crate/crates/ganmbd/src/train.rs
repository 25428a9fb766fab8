//! Alternating generator/discriminator training with the epoch-gated
//! recycling pass.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::{adv_loss, cls_loss_term, cycle_loss, gen_adv_term, GenAdvVariant, LossReport};
use crate::networks::{Discriminator, Generator, GeneratorSpec, MultiBranchDiscriminatorSpec, Refiner};
use crate::nn::{one_hot, ParamStore};
use crate::optim::Adam;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Recycling is frozen until the current epoch number is larger than half
/// of the total number of epochs (epochs are 1-based).
pub fn recycling_gate(epoch: usize, total_epochs: usize) -> bool {
    2 * epoch > total_epochs
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub recycling_enabled: bool,
    pub lambda_cls: f64,
    pub lambda_cyc: f64,
    pub seed: u64,
    pub gen_adv: GenAdvVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 50,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            recycling_enabled: true,
            lambda_cls: crate::loss::LAMBDA_CLS,
            lambda_cyc: crate::loss::LAMBDA_CYC,
            seed: 0,
            gen_adv: GenAdvVariant::NonSaturating,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.recycling_enabled && self.total_epochs < 2 {
            return Err(Error::config("recycling needs at least 2 epochs (the gate opens in the second half)"));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::config("batch_size and total_epochs must be positive"));
        }
        if self.lambda_cls < 0.0 || self.lambda_cyc < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Generator + multi-branch discriminator sharing one parameter store
/// (prefixes `g.` and `d.`).
pub struct GanModel {
    pub store: ParamStore<f32>,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl GanModel {
    pub fn build(gen_spec: GeneratorSpec, disc_spec: MultiBranchDiscriminatorSpec, seed: u64) -> Result<Self> {
        if gen_spec.num_classes != disc_spec.num_classes
            || gen_spec.image_side != disc_spec.image_side
        {
            return Err(Error::config("generator and discriminator specs disagree on classes or image side"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::build(gen_spec, &mut store, "g", &mut rng)?;
        let discriminator = Discriminator::build(disc_spec, &mut store, "d", &mut rng)?;
        Ok(GanModel { store, generator, discriminator })
    }

    /// Forward-only translation of a batch to the target labels.
    pub fn translate(&self, images: &Tensor<f32>, src: &[usize], tgt: &[usize]) -> Result<Tensor<f32>> {
        let k = self.generator.spec.num_classes;
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let c_src = tape.constant(one_hot(src, k)?);
        let c_tgt = tape.constant(one_hot(tgt, k)?);
        let fake = self.generator.forward(&tape, &self.store, x, c_src, c_tgt)?;
        Ok(tape.value(fake))
    }

    /// Forward-only recycling pass: the same generator with the target label
    /// at both conditioning points.
    pub fn recycle(&self, images: &Tensor<f32>, tgt: &[usize]) -> Result<Tensor<f32>> {
        self.translate(images, tgt, tgt)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainState {
    /// Current epoch, 1-based; 0 before training starts.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<LossReport>,
    /// Cumulative wall-clock spent inside train_step, seconds.
    pub train_seconds: f64,
    /// Wall-clock duration of each step, seconds.
    pub step_seconds: Vec<f64>,
}

impl TrainState {
    /// Wall-clock seconds per 1000 iterations so far.
    pub fn sec_per_1k(&self) -> f64 {
        if self.step == 0 {
            0.0
        } else {
            self.train_seconds / self.step as f64 * 1000.0
        }
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &GanModel, config: TrainConfig) -> Result<Self> {
        let opt_g = Adam::new(
            &model.store,
            model.store.ids_with_prefix("g."),
            config.lr,
            config.beta1,
            config.beta2,
        )?;
        let opt_d = Adam::new(
            &model.store,
            model.store.ids_with_prefix("d."),
            config.lr,
            config.beta1,
            config.beta2,
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { config, state: TrainState::default(), opt_g, opt_d, rng })
    }

    /// Uniform target label different from the source.
    fn sample_targets(&mut self, src: &[usize], k: usize) -> Vec<usize> {
        src.iter()
            .map(|&s| {
                let r = self.rng.random_range(0..k - 1);
                if r >= s {
                    r + 1
                } else {
                    r
                }
            })
            .collect()
    }

    /// One alternating update: D on real + freshly translated (detached)
    /// fakes, then G with adversarial, classification, cycle, and (when the
    /// gate is open) recycling terms.
    pub fn train_step(&mut self, model: &mut GanModel, images: &Tensor<f32>, labels: &[usize]) -> Result<LossReport> {
        let started = Instant::now();
        let k = model.generator.spec.num_classes;
        let targets = self.sample_targets(labels, k);
        let src_oh = one_hot::<f32>(labels, k)?;
        let tgt_oh = one_hot::<f32>(&targets, k)?;
        let gate_open = self.config.recycling_enabled
            && recycling_gate(self.state.epoch.max(1), self.config.total_epochs);

        // Generator graph: translate once; this forward is reused by the D
        // update (detached) and by every G-side term.
        let tape_g = Tape::new();
        let x_g = tape_g.constant(images.clone());
        let c_src = tape_g.constant(src_oh.clone());
        let c_tgt = tape_g.constant(tgt_oh.clone());
        let fake = model.generator.forward(&tape_g, &model.store, x_g, c_src, c_tgt)?;
        let fake_value = tape_g.value(fake);

        // --- discriminator update -----------------------------------------
        let tape_d = Tape::new();
        let x_d = tape_d.constant(images.clone());
        let fake_d = tape_d.constant(fake_value);
        let (real_outs, _) = model.discriminator.forward(&tape_d, &model.store, x_d)?;
        let (fake_outs, _) = model.discriminator.forward(&tape_d, &model.store, fake_d)?;
        let real_adv: Vec<_> = real_outs.iter().map(|o| o.adv).collect();
        let fake_adv: Vec<_> = fake_outs.iter().map(|o| o.adv).collect();
        let (d_term, _) = adv_loss(&tape_d, &real_adv, &fake_adv, self.config.gen_adv)?;
        let real_cls: Vec<_> = real_outs.iter().map(|o| o.cls).collect();
        let cls_real = cls_loss_term(&tape_d, &real_cls, &src_oh)?;
        let d_obj = tape_d.add(tape_d.neg(d_term), tape_d.scale(cls_real, self.config.lambda_cls))?;
        let adv_d_v = tape_d.scalar_value(d_term) as f64;
        let cls_real_v = tape_d.scalar_value(cls_real) as f64;
        let total_d_v = tape_d.scalar_value(d_obj) as f64;
        let d_grads = tape_d.backward(d_obj, &model.store)?;
        self.opt_d.step(&mut model.store, &d_grads)?;

        // --- generator update (against the just-updated discriminator) ----
        let (fake_outs_g, _) = model.discriminator.forward(&tape_g, &model.store, fake)?;
        let fake_adv_g: Vec<_> = fake_outs_g.iter().map(|o| o.adv).collect();
        let fake_cls_g: Vec<_> = fake_outs_g.iter().map(|o| o.cls).collect();
        let mut adv_g = gen_adv_term(&tape_g, &fake_adv_g, self.config.gen_adv)?;
        let mut cls_fake = cls_loss_term(&tape_g, &fake_cls_g, &tgt_oh)?;

        // cycle pass: translate the fake back with the source label at both
        // conditioning points
        let c_src2 = tape_g.constant(src_oh.clone());
        let c_src3 = tape_g.constant(src_oh.clone());
        let x_back = model.generator.forward(&tape_g, &model.store, fake, c_src2, c_src3)?;
        let cyc = cycle_loss(&tape_g, x_g, x_back)?;

        if gate_open {
            // recycling: same generator, target label at both positions;
            // the output receives the same adversarial + classification terms
            let c_tgt2 = tape_g.constant(tgt_oh.clone());
            let c_tgt3 = tape_g.constant(tgt_oh.clone());
            let recycled = model.generator.forward(&tape_g, &model.store, fake, c_tgt2, c_tgt3)?;
            let (rec_outs, _) = model.discriminator.forward(&tape_g, &model.store, recycled)?;
            let rec_adv: Vec<_> = rec_outs.iter().map(|o| o.adv).collect();
            let rec_cls: Vec<_> = rec_outs.iter().map(|o| o.cls).collect();
            let rec_adv_term = gen_adv_term(&tape_g, &rec_adv, self.config.gen_adv)?;
            let rec_cls_term = cls_loss_term(&tape_g, &rec_cls, &tgt_oh)?;
            adv_g = tape_g.add(adv_g, rec_adv_term)?;
            cls_fake = tape_g.add(cls_fake, rec_cls_term)?;
        }

        let g_obj = {
            let weighted_cls = tape_g.scale(cls_fake, self.config.lambda_cls);
            let weighted_cyc = tape_g.scale(cyc, self.config.lambda_cyc);
            let a = tape_g.add(adv_g, weighted_cls)?;
            tape_g.add(a, weighted_cyc)?
        };
        let report = LossReport {
            adv_d: adv_d_v,
            adv_g: tape_g.scalar_value(adv_g) as f64,
            cls_real: cls_real_v,
            cls_fake: tape_g.scalar_value(cls_fake) as f64,
            cyc: tape_g.scalar_value(cyc) as f64,
            total_d: total_d_v,
            total_g: tape_g.scalar_value(g_obj) as f64,
        };
        if !report.is_finite() {
            return Err(Error::train(format!("non-finite loss, step aborted: {report:?}")));
        }
        let g_grads = tape_g.backward(g_obj, &model.store)?;
        self.opt_g.step(&mut model.store, &g_grads)?;

        self.state.step += 1;
        let elapsed = started.elapsed().as_secs_f64();
        self.state.train_seconds += elapsed;
        self.state.step_seconds.push(elapsed);
        self.state.history.push(report);
        Ok(report)
    }

    /// Run epochs `state.epoch+1 ..= config.total_epochs` over the dataset,
    /// shuffling each epoch with the trainer's seeded generator. The callback
    /// runs after every epoch (checkpointing, sample grids, logging).
    pub fn train_loop(
        &mut self,
        model: &mut GanModel,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(&mut Trainer, &GanModel) -> Result<()>,
    ) -> Result<()> {
        self.config.validate()?;
        if dataset.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        let distinct = {
            let mut l = dataset.labels.clone();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        if distinct < 2 {
            return Err(Error::config("dataset must contain at least 2 classes"));
        }
        while self.state.epoch < self.config.total_epochs {
            self.state.epoch += 1;
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let images = dataset.batch(chunk)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
                self.train_step(model, &images, &labels)?;
            }
            on_epoch(self, model)?;
        }
        Ok(())
    }

    /// Full training snapshot: model weights, both optimizers, counters, and
    /// the RNG position, so a resumed run continues bit-exactly.
    pub fn save_checkpoint(&self, model: &GanModel, dir: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.add_store("", &model.store);
        for (opt, pfx) in [(&self.opt_g, "adam_g"), (&self.opt_d, "adam_d")] {
            let (t, m, v) = opt.state();
            ck.set_meta(format!("{pfx}.t"), t);
            for (i, &id) in opt.ids().iter().enumerate() {
                ck.add_tensor(format!("{pfx}.m.{}", model.store.name(id)), m[i].clone());
                ck.add_tensor(format!("{pfx}.v.{}", model.store.name(id)), v[i].clone());
            }
        }
        ck.set_meta("epoch", self.state.epoch);
        ck.set_meta("step", self.state.step);
        ck.set_meta("rng.seed", hex(&self.rng.get_seed()));
        ck.set_meta("rng.word_pos", self.rng.get_word_pos());
        ck.set_meta("rng.stream", self.rng.get_stream());
        ck.set_meta("num_classes", model.generator.spec.num_classes);
        ck.set_meta("image_side", model.generator.spec.image_side);
        ck.set_meta("branches", model.discriminator.spec.branches);
        ck.save(dir)
    }

    /// Restore weights, optimizer state, counters, and RNG position.
    pub fn load_checkpoint(&mut self, model: &mut GanModel, dir: &Path) -> Result<()> {
        let ck = Checkpoint::load(dir)?;
        ck.restore_store("", &mut model.store)?;
        for (opt, pfx) in [(&mut self.opt_g, "adam_g"), (&mut self.opt_d, "adam_d")] {
            let t: u64 = ck.meta_parsed(&format!("{pfx}.t"))?;
            let mut m = Vec::new();
            let mut v = Vec::new();
            for &id in opt.ids() {
                m.push(ck.tensor(&format!("{pfx}.m.{}", model.store.name(id)))?.clone());
                v.push(ck.tensor(&format!("{pfx}.v.{}", model.store.name(id)))?.clone());
            }
            opt.restore(t, m, v)?;
        }
        self.state.epoch = ck.meta_parsed("epoch")?;
        self.state.step = ck.meta_parsed("step")?;
        let seed = unhex(
            ck.meta("rng.seed")
                .ok_or_else(|| Error::checkpoint("missing rng.seed"))?,
        )?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ck.meta_parsed("rng.stream")?);
        rng.set_word_pos(ck.meta_parsed("rng.word_pos")?);
        self.rng = rng;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Refiner training
// ---------------------------------------------------------------------------

/// Refiner plus the single-branch patch discriminator it trains against
/// (prefixes `r.` and `d.` in one store).
pub struct RefinerModel {
    pub store: ParamStore<f32>,
    pub refiner: Refiner,
    pub discriminator: Discriminator,
}

impl RefinerModel {
    pub fn build(base_channels: usize, image_side: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refiner = Refiner::build(base_channels, image_side, &mut store, "r", &mut rng)?;
        let disc_spec = MultiBranchDiscriminatorSpec {
            branches: 1,
            base_channels: base_channels.max(8),
            n_layers: 3,
            num_classes: 2,
            image_side,
            in_channels: 3,
            head_channels: base_channels.max(8),
            max_channels: 8 * base_channels.max(8),
        };
        let discriminator = Discriminator::build(disc_spec, &mut store, "d", &mut rng)?;
        Ok(RefinerModel { store, refiner, discriminator })
    }

    /// Forward-only application of the refiner to a batch.
    pub fn refine(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.refiner.forward(&tape, &self.store, x)?;
        Ok(tape.value(out))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.add_store("", &self.store);
        ck.set_meta("base_channels", self.refiner.base_channels);
        ck.set_meta("image_side", self.refiner.image_side);
        ck.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        let base_channels = ck.meta_parsed("base_channels")?;
        let image_side = ck.meta_parsed("image_side")?;
        let mut model = RefinerModel::build(base_channels, image_side, 0)?;
        ck.restore_store("", &mut model.store)?;
        Ok(model)
    }
}

/// Per-step losses of the refiner run: patch-discriminator objective,
/// adversarial term on the refined output, and the reconstruction L1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinerReport {
    pub adv_d: f64,
    pub adv_g: f64,
    pub l1: f64,
    pub total_g: f64,
}

#[derive(Clone, Debug)]
pub struct RefinerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_l1: f64,
    pub seed: u64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        RefinerTrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda_l1: 100.0,
            seed: 0,
        }
    }
}

pub struct RefinerTrainer {
    pub config: RefinerTrainConfig,
    pub history: Vec<RefinerReport>,
    opt_r: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
}

impl RefinerTrainer {
    pub fn new(model: &RefinerModel, config: RefinerTrainConfig) -> Result<Self> {
        if config.epochs == 0 || config.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        let opt_r = Adam::new(
            &model.store,
            model.store.ids_with_prefix("r."),
            config.lr,
            config.beta1,
            config.beta2,
        )?;
        let opt_d = Adam::new(
            &model.store,
            model.store.ids_with_prefix("d."),
            config.lr,
            config.beta1,
            config.beta2,
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(RefinerTrainer { config, history: Vec::new(), opt_r, opt_d, rng })
    }

    /// One alternating update on a batch of (degraded, original) pairs.
    pub fn train_step(
        &mut self,
        model: &mut RefinerModel,
        degraded: &Tensor<f32>,
        originals: &Tensor<f32>,
    ) -> Result<RefinerReport> {
        let tape_g = Tape::new();
        let x = tape_g.constant(degraded.clone());
        let target = tape_g.constant(originals.clone());
        let out = model.refiner.forward(&tape_g, &model.store, x)?;
        let out_value = tape_g.value(out);

        // patch discriminator: originals real, refined outputs fake
        let tape_d = Tape::new();
        let real = tape_d.constant(originals.clone());
        let fake = tape_d.constant(out_value);
        let (real_outs, _) = model.discriminator.forward(&tape_d, &model.store, real)?;
        let (fake_outs, _) = model.discriminator.forward(&tape_d, &model.store, fake)?;
        let real_adv: Vec<_> = real_outs.iter().map(|o| o.adv).collect();
        let fake_adv: Vec<_> = fake_outs.iter().map(|o| o.adv).collect();
        let (d_term, _) = adv_loss(&tape_d, &real_adv, &fake_adv, GenAdvVariant::NonSaturating)?;
        let d_obj = tape_d.neg(d_term);
        let adv_d = tape_d.scalar_value(d_term) as f64;
        let d_grads = tape_d.backward(d_obj, &model.store)?;
        self.opt_d.step(&mut model.store, &d_grads)?;

        // refiner: adversarial term against the updated discriminator + L1
        let (outs_g, _) = model.discriminator.forward(&tape_g, &model.store, out)?;
        let adv_vars: Vec<_> = outs_g.iter().map(|o| o.adv).collect();
        let adv_g = gen_adv_term(&tape_g, &adv_vars, GenAdvVariant::NonSaturating)?;
        let l1 = cycle_loss(&tape_g, target, out)?;
        let g_obj = tape_g.add(adv_g, tape_g.scale(l1, self.config.lambda_l1))?;
        let report = RefinerReport {
            adv_d,
            adv_g: tape_g.scalar_value(adv_g) as f64,
            l1: tape_g.scalar_value(l1) as f64,
            total_g: tape_g.scalar_value(g_obj) as f64,
        };
        if !(report.adv_d.is_finite() && report.total_g.is_finite()) {
            return Err(Error::train(format!("non-finite refiner loss, step aborted: {report:?}")));
        }
        let g_grads = tape_g.backward(g_obj, &model.store)?;
        self.opt_r.step(&mut model.store, &g_grads)?;
        self.history.push(report);
        Ok(report)
    }

    /// Epoch loop over (degraded, original) pairs with seeded shuffling.
    pub fn train_loop(
        &mut self,
        model: &mut RefinerModel,
        pairs: &[(Tensor<f32>, Tensor<f32>)],
        mut on_epoch: impl FnMut(usize, &RefinerTrainer, &RefinerModel) -> Result<()>,
    ) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::config("no training pairs"));
        }
        for epoch in 1..=self.config.epochs {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let degraded = stack_batch(pairs, chunk, |p| &p.0)?;
                let originals = stack_batch(pairs, chunk, |p| &p.1)?;
                self.train_step(model, &degraded, &originals)?;
            }
            on_epoch(epoch, self, model)?;
        }
        Ok(())
    }
}

fn stack_batch<F>(pairs: &[(Tensor<f32>, Tensor<f32>)], idx: &[usize], pick: F) -> Result<Tensor<f32>>
where
    F: Fn(&(Tensor<f32>, Tensor<f32>)) -> &Tensor<f32>,
{
    let first = pick(&pairs[idx[0]]);
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * first.numel());
    for &i in idx {
        let t = pick(&pairs[i]);
        if t.shape() != shape {
            return Err(Error::usage("inconsistent pair shapes"));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![idx.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::from_vec(out_shape, data)
}

fn hex(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::checkpoint("rng.seed must be 32 hex bytes"));
    }
    let mut out = [0u8; 32];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::checkpoint("rng.seed is not valid hex"))?;
    }
    Ok(out)
}
