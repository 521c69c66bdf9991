//! Unpaired cycle-consistent training of the mask->H&E generator `G` and
//! the reverse mapping `S`, plus synthetic dataset emission.
//!
//! One step performs the alternating update: generators first on
//! `adv(D_N(G(m))) + adv(D_M(S(n))) + cycle`, then each discriminator on its
//! real/fake BCE with the fakes detached. The discriminator objective is
//! halved by default (giving it an effectively lower learning rate, so the
//! generator stays ahead). Spectral normalization runs inside every
//! discriminator forward pass.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::{cycle_loss, gan_loss_discriminator, gan_loss_generator, LossWeights};
use crate::masks::{render_mask_image, sample_mask, SamplerParams, ShapeDictionary};
use crate::nn::{build_network, Binding, CheckpointMeta, Network, NetworkSpec, WeightSet};
use crate::pipeline::{DatasetManifest, ManifestRecord, Source, Split};
use crate::raster::RgbImage;

/// Linear learning-rate schedule: constant until `decay_start`, then a
/// straight line to zero at `epochs`.
pub fn lr_schedule(base_lr: f64, epochs: usize, decay_start: usize, epoch: usize) -> Result<f64> {
    if epoch > epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} out of range 0..={epochs}"
        )));
    }
    if epoch < decay_start {
        Ok(base_lr)
    } else {
        Ok(base_lr * (epochs - epoch) as f64 / (epochs - decay_start) as f64)
    }
}

/// Adam with per-parameter first/second moment state.
#[derive(Debug, Clone)]
pub struct Adam<E: Elem> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (ArrayD<E>, ArrayD<E>)>,
    t: i32,
}

impl<E: Elem> Adam<E> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam { beta1, beta2, eps: 1e-8, state: BTreeMap::new(), t: 0 }
    }

    /// Apply one update with the step's learning rate.
    pub fn step(
        &mut self,
        ws: &mut WeightSet<E>,
        grads: &BTreeMap<String, ArrayD<E>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = E::c(self.beta1);
        let b2 = E::c(self.beta2);
        let bias1 = E::c(1.0 - self.beta1.powi(self.t));
        let bias2 = E::c(1.0 - self.beta2.powi(self.t));
        let lr_e = E::c(lr);
        let eps = E::c(self.eps);
        for (name, g) in grads {
            let param = ws.params.get_mut(name).expect("gradient for unknown parameter");
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (E::one() - b1) * g;
                    *v = b2 * *v + (E::one() - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p = *p - lr_e * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Training hyperparameters plus the network sizes for this stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_start_epoch: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Divide the discriminator objective by two (lower effective lr).
    pub disc_loss_halved: bool,
    pub gen_base_width: usize,
    pub n_resblocks: usize,
    pub disc_base_width: usize,
    /// Record per-step activations in reports (testing hook).
    pub record_activations: bool,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        SynthTrainConfig {
            epochs: 300,
            lr: 2e-4,
            lr_decay_start_epoch: 150,
            batch_size: 1,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weights: LossWeights::synth_defaults(),
            seed: 0,
            disc_loss_halved: true,
            gen_base_width: 64,
            n_resblocks: 9,
            disc_base_width: 64,
            record_activations: false,
        }
    }
}

impl SynthTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_decay_start_epoch >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "lr_decay_start_epoch {} must be < epochs {}",
                self.lr_decay_start_epoch, self.epochs
            )));
        }
        self.weights.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_schedule(self.lr, self.epochs, self.lr_decay_start_epoch, epoch)
    }
}

/// Loss components of one synthesis step.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStepReport {
    pub step: u64,
    pub loss_gen_total: f32,
    pub loss_adv_g: f32,
    pub loss_adv_s: f32,
    pub loss_cycle: f32,
    /// Unweighted forward-cycle reconstruction error `mean |G(S(n)) - n|`.
    pub forward_cycle_l1: f32,
    pub loss_d_n: f32,
    pub loss_d_m: f32,
    pub activations: Option<SynthActivations>,
}

/// Intermediate tensors for compositional loss verification in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthActivations {
    pub fake_n: ArrayD<f32>,
    pub rec_m: ArrayD<f32>,
    pub fake_m: ArrayD<f32>,
    pub rec_n: ArrayD<f32>,
    pub dn_fake_scores: ArrayD<f32>,
    pub dm_fake_scores: ArrayD<f32>,
    pub dn_real_scores: ArrayD<f32>,
    pub dn_fake_detached_scores: ArrayD<f32>,
    pub dm_real_scores: ArrayD<f32>,
    pub dm_fake_detached_scores: ArrayD<f32>,
}

/// Owns the four networks of the cycle setup.
#[derive(Clone)]
pub struct SynthTrainer {
    pub cfg: SynthTrainConfig,
    pub g: Network,
    pub g_ws: WeightSet<f32>,
    pub s: Network,
    pub s_ws: WeightSet<f32>,
    pub d_n: Network,
    pub d_n_ws: WeightSet<f32>,
    pub d_m: Network,
    pub d_m_ws: WeightSet<f32>,
    opt_g: Adam<f32>,
    opt_s: Adam<f32>,
    opt_dn: Adam<f32>,
    opt_dm: Adam<f32>,
    pub step_count: u64,
    pub snapshot_dir: Option<PathBuf>,
}

impl SynthTrainer {
    pub fn new(cfg: SynthTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let g_spec = NetworkSpec::resnet_generator(3, 3, cfg.gen_base_width, cfg.n_resblocks);
        let s_spec = NetworkSpec::resnet_generator(3, 3, cfg.gen_base_width, cfg.n_resblocks);
        let d_spec = NetworkSpec::patch_discriminator(3, cfg.disc_base_width, true);
        let (g, g_ws) = build_network(&g_spec, cfg.seed)?;
        let (s, s_ws) = build_network(&s_spec, cfg.seed.wrapping_add(1))?;
        let (d_n, d_n_ws) = build_network(&d_spec, cfg.seed.wrapping_add(2))?;
        let (d_m, d_m_ws) = build_network(&d_spec, cfg.seed.wrapping_add(3))?;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let opt = || Adam::new(b1, b2);
        Ok(SynthTrainer {
            cfg,
            g,
            g_ws,
            s,
            s_ws,
            d_n,
            d_n_ws,
            d_m,
            d_m_ws,
            opt_g: opt(),
            opt_s: opt(),
            opt_dn: opt(),
            opt_dm: opt(),
            step_count: 0,
            snapshot_dir: None,
        })
    }

    /// One alternating update on an unpaired (mask render, H&E) example.
    /// Inputs are `[1,3,H,W]` in [-1,1].
    pub fn train_step(
        &mut self,
        m: &ArrayD<f32>,
        n: &ArrayD<f32>,
        lr: f64,
    ) -> Result<SynthStepReport> {
        self.step_count += 1;
        let step = self.step_count;

        // generator update
        let tape = Tape::new();
        let binding = Binding::new(&tape);
        let m_t = tape.leaf(m.clone());
        let n_t = tape.leaf(n.clone());
        let fake_n = self.g.forward(&binding, &self.g_ws, m_t)?;
        let rec_m = self.s.forward(&binding, &self.s_ws, fake_n)?;
        let fake_m = self.s.forward(&binding, &self.s_ws, n_t)?;
        let rec_n = self.g.forward(&binding, &self.g_ws, fake_m)?;
        let dn_fake = self.d_n.forward(&binding, &self.d_n_ws, fake_n)?;
        let dm_fake = self.d_m.forward(&binding, &self.d_m_ws, fake_m)?;
        let adv_g = gan_loss_generator(dn_fake);
        let adv_s = gan_loss_generator(dm_fake);
        let cyc = cycle_loss(m_t, n_t, rec_m, rec_n, &self.cfg.weights)?;
        let total = adv_g.add(adv_s).add(cyc);
        let forward_cycle_l1 = rec_n.sub(n_t).abs().mean().scalar();
        self.check_finite(step, "generator", total.scalar())?;

        let g_names = self.g_ws.trainable_names();
        let s_names = self.s_ws.trainable_names();
        apply_update(
            &tape,
            &binding,
            total,
            &mut [
                (&g_names, &mut self.g_ws, &mut self.opt_g, lr),
                (&s_names, &mut self.s_ws, &mut self.opt_s, lr),
            ],
        );
        // D forwards above refreshed spectral-norm state
        binding.apply_staged_u(&mut self.d_n_ws);
        binding.apply_staged_u(&mut self.d_m_ws);

        let fake_n_val = fake_n.value();
        let fake_m_val = fake_m.value();
        let acts_partial = if self.cfg.record_activations {
            Some((fake_n_val.clone(), rec_m.value(), fake_m_val.clone(), rec_n.value(), dn_fake.value(), dm_fake.value()))
        } else {
            None
        };

        // discriminator updates on detached fakes
        let halved = self.cfg.disc_loss_halved;
        let (loss_d_n, dn_scores) = disc_update(
            &self.d_n,
            &mut self.d_n_ws,
            &mut self.opt_dn,
            n,
            &fake_n_val,
            halved,
            lr,
        )?;
        self.check_finite(step, "d_n", loss_d_n)?;
        let (loss_d_m, dm_scores) = disc_update(
            &self.d_m,
            &mut self.d_m_ws,
            &mut self.opt_dm,
            m,
            &fake_m_val,
            halved,
            lr,
        )?;
        self.check_finite(step, "d_m", loss_d_m)?;

        let activations = acts_partial.map(
            |(fake_n, rec_m, fake_m, rec_n, dn_fake_scores, dm_fake_scores)| SynthActivations {
                fake_n,
                rec_m,
                fake_m,
                rec_n,
                dn_fake_scores,
                dm_fake_scores,
                dn_real_scores: dn_scores.0,
                dn_fake_detached_scores: dn_scores.1,
                dm_real_scores: dm_scores.0,
                dm_fake_detached_scores: dm_scores.1,
            },
        );

        Ok(SynthStepReport {
            step,
            loss_gen_total: total.scalar(),
            loss_adv_g: adv_g.scalar(),
            loss_adv_s: adv_s.scalar(),
            loss_cycle: cyc.scalar(),
            forward_cycle_l1,
            loss_d_n: loss_d_n,
            loss_d_m: loss_d_m,
            activations,
        })
    }

    fn check_finite(&self, step: u64, stage: &str, v: f32) -> Result<()> {
        if v.is_finite() {
            return Ok(());
        }
        if let Some(dir) = &self.snapshot_dir {
            let _ = self.save_checkpoints(dir); // best effort before aborting
        }
        Err(Error::NonFinite { step, detail: format!("{stage} loss = {v}") })
    }

    /// Write all four networks as separate checkpoints.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let extra = BTreeMap::from([("step".to_string(), self.step_count.to_string())]);
        for (name, net, ws) in [
            ("g", &self.g, &self.g_ws),
            ("s", &self.s, &self.s_ws),
            ("d_n", &self.d_n, &self.d_n_ws),
            ("d_m", &self.d_m, &self.d_m_ws),
        ] {
            let meta = CheckpointMeta { spec: net.spec.clone(), extra: extra.clone() };
            crate::nn::save_checkpoint(dir.join(format!("{name}.ckpt")), &meta, ws)?;
        }
        Ok(())
    }
}

/// Backward a loss and apply one Adam step per parameter group.
fn apply_update<'t>(
    tape: &'t Tape<f32>,
    binding: &Binding<'t, f32>,
    loss: Tensor<'t, f32>,
    groups: &mut [(&Vec<String>, &mut WeightSet<f32>, &mut Adam<f32>, f64)],
) {
    // gather all bound leaves across groups so one backward pass serves all
    let mut all: Vec<(usize, String, Tensor<'t, f32>)> = Vec::new();
    for (gi, (names, _, _, _)) in groups.iter().enumerate() {
        for (name, t) in binding.bound_params(names) {
            all.push((gi, name, t));
        }
    }
    let tensors: Vec<Tensor<f32>> = all.iter().map(|(_, _, t)| *t).collect();
    let grads = tape.backward(loss, &tensors);
    let mut per_group: Vec<BTreeMap<String, ArrayD<f32>>> =
        groups.iter().map(|_| BTreeMap::new()).collect();
    for ((gi, name, _), grad) in all.into_iter().zip(grads) {
        if let Some(g) = grad {
            per_group[gi].insert(name, g.value());
        }
    }
    for ((_, ws, opt, lr), grads) in groups.iter_mut().zip(per_group) {
        opt.step(ws, &grads, *lr);
    }
}

/// Discriminator update with detached fakes; returns the (possibly halved)
/// loss and the (real, fake) score maps.
#[allow(clippy::type_complexity)]
fn disc_update(
    net: &Network,
    ws: &mut WeightSet<f32>,
    opt: &mut Adam<f32>,
    real: &ArrayD<f32>,
    fake_detached: &ArrayD<f32>,
    halved: bool,
    lr: f64,
) -> Result<(f32, (ArrayD<f32>, ArrayD<f32>))> {
    let tape = Tape::new();
    let binding = Binding::new(&tape);
    let real_t = tape.leaf(real.clone());
    let fake_t = tape.leaf(fake_detached.clone());
    let real_scores = net.forward(&binding, ws, real_t)?;
    let fake_scores = net.forward(&binding, ws, fake_t)?;
    let mut loss = gan_loss_discriminator(real_scores, fake_scores)?;
    if halved {
        loss = loss.scale(0.5);
    }
    let names = ws.trainable_names();
    apply_update(&tape, &binding, loss, &mut [(&names, ws, opt, lr)]);
    binding.apply_staged_u(ws);
    Ok((loss.scalar(), (real_scores.value(), fake_scores.value())))
}

/// Gradients (not applied) of the discriminator objective; used to verify
/// the halving contract.
pub fn discriminator_gradients(
    net: &Network,
    ws: &WeightSet<f32>,
    real: &ArrayD<f32>,
    fake: &ArrayD<f32>,
    halved: bool,
) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let tape = Tape::new();
    let binding = Binding::new(&tape);
    let real_t = tape.leaf(real.clone());
    let fake_t = tape.leaf(fake.clone());
    let real_scores = net.forward(&binding, ws, real_t)?;
    let fake_scores = net.forward(&binding, ws, fake_t)?;
    let mut loss = gan_loss_discriminator(real_scores, fake_scores)?;
    if halved {
        loss = loss.scale(0.5);
    }
    let names = ws.trainable_names();
    let bound = binding.bound_params(&names);
    let tensors: Vec<_> = bound.iter().map(|(_, t)| *t).collect();
    let grads = tape.backward(loss, &tensors);
    Ok(bound
        .into_iter()
        .zip(grads)
        .filter_map(|((name, _), g)| g.map(|g| (name, g.value())))
        .collect())
}

/// Scale an RGB render into the `[-1,1]` `[1,3,H,W]` tensor layout.
pub fn image_to_tensor(img: &RgbImage) -> ArrayD<f32> {
    let (h, w) = (img.height(), img.width());
    let mut out = ArrayD::zeros(IxDyn(&[1, 3, h, w]));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[0, c, y, x]] = img.pixels[[y, x, c]] as f32 / 127.5 - 1.0;
            }
        }
    }
    out
}

/// Inverse of [`image_to_tensor`] with clamping.
pub fn tensor_to_image(t: &ArrayD<f32>) -> RgbImage {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let mut img = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (t[[0, c, y, x]] + 1.0) * 127.5;
                img.pixels[[y, x, c]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Run a trained generator over sampled masks and persist a perfectly
/// labeled synthetic dataset: H&E patch + instance map per record, plus a
/// manifest carrying seeds and the configuration hash.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic_dataset(
    g: &Network,
    g_ws: &WeightSet<f32>,
    dict: &ShapeDictionary,
    sampler: &SamplerParams,
    count: usize,
    seed: u64,
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    use rayon::prelude::*;
    let manifest_path = out_dir.join("manifest.json");
    if manifest_path.exists() && !overwrite {
        return Err(Error::OutputExists(manifest_path));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let config_hash = {
        use sha2::Digest;
        let mut hasher = sha2::Sha256::new();
        hasher.update(serde_json::to_vec(sampler).expect("sampler serializes"));
        hasher.update(seed.to_le_bytes());
        hasher.update(count.to_le_bytes());
        hex_string(&hasher.finalize())
    };

    let records: Result<Vec<ManifestRecord>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let pair_seed = seed.wrapping_add(i as u64);
            let pair = sample_mask(dict, sampler, pair_seed)?;
            let render = render_mask_image(&pair);
            let x = image_to_tensor(&render);
            let tape = Tape::new();
            let binding = Binding::new(&tape);
            let xt = tape.leaf(x);
            let y = g.forward(&binding, g_ws, xt)?;
            let img = tensor_to_image(&y.value());
            let img_name = format!("synth_{i:05}.png");
            let inst_name = format!("synth_{i:05}.inst.png");
            img.save(out_dir.join(&img_name))?;
            pair.instances.save(out_dir.join(&inst_name))?;
            Ok(ManifestRecord {
                image: img_name,
                instances: inst_name,
                organ: "synthetic".into(),
                patient: "synthetic".into(),
                split: Split::Train,
                source: Source::Synthetic,
                seed: Some(pair_seed),
            })
        })
        .collect();

    let manifest = DatasetManifest::new(records?, config_hash);
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic toy colorization used by trainer tests: nuclei purple,
/// seams darker, background pink.
#[cfg(test)]
pub(crate) fn colorize_render(render: &RgbImage) -> RgbImage {
    RgbImage::from_fn(render.height(), render.width(), |y, x| {
        if render.get(y, x)[0] > 200 {
            [120, 60, 160]
        } else if render.get(y, x)[0] > 64 {
            [90, 45, 120]
        } else {
            [230, 180, 200]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::disk_dictionary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> SynthTrainConfig {
        SynthTrainConfig {
            epochs: 10,
            lr_decay_start_epoch: 5,
            gen_base_width: 4,
            n_resblocks: 1,
            disc_base_width: 4,
            seed: 9,
            ..Default::default()
        }
    }

    fn random_batch(seed: u64, hw: usize) -> (ArrayD<f32>, ArrayD<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = ArrayD::from_shape_fn(IxDyn(&[1, 3, hw, hw]), |_| rng.random_range(-1.0f32..1.0));
        let n = ArrayD::from_shape_fn(IxDyn(&[1, 3, hw, hw]), |_| rng.random_range(-1.0f32..1.0));
        (m, n)
    }

    #[test]
    fn lr_schedule_paper_values() {
        assert_eq!(lr_schedule(2e-4, 300, 150, 0).unwrap(), 2e-4);
        assert_eq!(lr_schedule(2e-4, 300, 150, 149).unwrap(), 2e-4);
        assert!((lr_schedule(2e-4, 300, 150, 225).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(2e-4, 300, 150, 300).unwrap(), 0.0);
        assert_eq!(lr_schedule(2e-4, 400, 200, 300).unwrap(), 1e-4);
        assert_eq!(lr_schedule(2e-4, 400, 200, 400).unwrap(), 0.0);
        assert!(lr_schedule(2e-4, 300, 150, 301).is_err());
    }

    #[test]
    fn zero_lr_leaves_weights_bitwise_unchanged() {
        let mut trainer = SynthTrainer::new(tiny_config()).unwrap();
        let before = (
            trainer.g_ws.clone(),
            trainer.s_ws.clone(),
            trainer.d_n_ws.clone(),
            trainer.d_m_ws.clone(),
        );
        let (m, n) = random_batch(1, 32);
        trainer.train_step(&m, &n, 0.0).unwrap();
        // spectral-norm u buffers do change (power iteration); trainable
        // parameters must not
        for (ws_before, ws_after) in [
            (&before.0, &trainer.g_ws),
            (&before.1, &trainer.s_ws),
            (&before.2, &trainer.d_n_ws),
            (&before.3, &trainer.d_m_ws),
        ] {
            for name in ws_before.trainable_names() {
                assert_eq!(ws_before.get(&name), ws_after.get(&name), "{name} changed");
            }
        }
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let cfg = tiny_config();
        let mut a = SynthTrainer::new(cfg.clone()).unwrap();
        let mut b = SynthTrainer::new(cfg).unwrap();
        let (m, n) = random_batch(2, 32);
        let ra = a.train_step(&m, &n, 2e-4).unwrap();
        let rb = b.train_step(&m, &n, 2e-4).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.g_ws, b.g_ws);
        assert_eq!(a.d_n_ws, b.d_n_ws);
    }

    #[test]
    fn loss_components_match_direct_recomputation() {
        let mut cfg = tiny_config();
        cfg.record_activations = true;
        let weights = cfg.weights.clone();
        let mut trainer = SynthTrainer::new(cfg).unwrap();
        let (m, n) = random_batch(3, 32);
        let report = trainer.train_step(&m, &n, 1e-4).unwrap();
        let acts = report.activations.as_ref().unwrap();

        let tape = Tape::new();
        let adv_g = gan_loss_generator(tape.leaf(acts.dn_fake_scores.clone())).scalar();
        let adv_s = gan_loss_generator(tape.leaf(acts.dm_fake_scores.clone())).scalar();
        assert_eq!(adv_g, report.loss_adv_g);
        assert_eq!(adv_s, report.loss_adv_s);

        let cyc = cycle_loss(
            tape.leaf(m.clone()),
            tape.leaf(n.clone()),
            tape.leaf(acts.rec_m.clone()),
            tape.leaf(acts.rec_n.clone()),
            &weights,
        )
        .unwrap()
        .scalar();
        assert_eq!(cyc, report.loss_cycle);

        let d_n = gan_loss_discriminator(
            tape.leaf(acts.dn_real_scores.clone()),
            tape.leaf(acts.dn_fake_detached_scores.clone()),
        )
        .unwrap()
        .scalar()
            * 0.5;
        assert_eq!(d_n, report.loss_d_n);
    }

    #[test]
    fn disc_halving_halves_gradients_exactly() {
        let cfg = tiny_config();
        let trainer = SynthTrainer::new(cfg).unwrap();
        let (m, n) = random_batch(4, 32);
        let _ = m;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fake = ArrayD::from_shape_fn(IxDyn(&[1, 3, 32, 32]), |_| rng.random_range(-1.0f32..1.0));
        let full =
            discriminator_gradients(&trainer.d_n, &trainer.d_n_ws, &n, &fake, false).unwrap();
        let half =
            discriminator_gradients(&trainer.d_n, &trainer.d_n_ws, &n, &fake, true).unwrap();
        assert_eq!(full.len(), half.len());
        for (name, g_full) in &full {
            let g_half = &half[name];
            for (a, b) in g_full.iter().zip(g_half.iter()) {
                assert_eq!(*b, *a * 0.5, "{name}: {b} != 0.5 * {a}");
            }
        }
    }

    #[test]
    fn relaxed_backward_constraint_in_defaults() {
        let w = LossWeights::synth_defaults();
        assert!(w.lambda_m < w.lambda_n);
    }

    #[test]
    fn toy_cycle_training_reduces_forward_reconstruction() {
        // 32x32 disks <-> colorized disks; the forward-cycle L1 must drop
        // by at least 30% between step 1 and step 200
        let cfg = SynthTrainConfig {
            epochs: 10,
            lr_decay_start_epoch: 9,
            gen_base_width: 8,
            n_resblocks: 2,
            disc_base_width: 8,
            seed: 77,
            ..Default::default()
        };
        let mut trainer = SynthTrainer::new(cfg).unwrap();
        let dict = disk_dictionary(&[4.0, 5.5], 16);
        let params = SamplerParams {
            canvas: (64, 64),
            target_count: 4,
            clump_fraction: 0.0,
            max_overlap: 0.0,
            ..Default::default()
        };
        // pre-generate a small unpaired pool
        let mut masks = Vec::new();
        let mut images = Vec::new();
        for i in 0..16 {
            let pair = sample_mask(&dict, &params, 1000 + i).unwrap();
            let render = render_mask_image(&pair);
            masks.push(crop_tensor(&image_to_tensor(&render), 32));
            let colorized = colorize_render(&render);
            images.push(crop_tensor(&image_to_tensor(&colorized), 32));
        }
        let mut first = None;
        let mut last = 0.0;
        for step in 0..200 {
            let m = &masks[step % masks.len()];
            let n = &images[(step * 7 + 3) % images.len()];
            let report = trainer.train_step(m, n, 2e-4).unwrap();
            if step == 0 {
                first = Some(report.forward_cycle_l1);
            }
            last = report.forward_cycle_l1;
        }
        let first = first.unwrap();
        assert!(
            last <= 0.7 * first,
            "forward cycle error did not drop 30%: step1 {first} step200 {last}"
        );
    }

    fn crop_tensor(t: &ArrayD<f32>, size: usize) -> ArrayD<f32> {
        let mut out = ArrayD::zeros(IxDyn(&[1, 3, size, size]));
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    out[[0, c, y, x]] = t[[0, c, y, x]];
                }
            }
        }
        out
    }

    #[test]
    fn generate_dataset_counts_and_passthrough() {
        let cfg = tiny_config();
        let trainer = SynthTrainer::new(cfg).unwrap();
        let dict = disk_dictionary(&[5.0], 16);
        let params = SamplerParams {
            canvas: (64, 64),
            target_count: 3,
            clump_fraction: 0.0,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_dataset(
            &trainer.g,
            &trainer.g_ws,
            &dict,
            &params,
            5,
            42,
            dir.path(),
            false,
        )
        .unwrap();
        assert_eq!(manifest.records.len(), 5);
        for rec in &manifest.records {
            let img = RgbImage::load(dir.path().join(&rec.image)).unwrap();
            assert_eq!((img.height(), img.width()), (64, 64));
            // paired instance map is byte-identical to the sampled one
            let inst = crate::raster::InstanceMap::load(dir.path().join(&rec.instances)).unwrap();
            let resampled = sample_mask(&dict, &params, rec.seed.unwrap()).unwrap();
            assert_eq!(inst, resampled.instances);
        }
        // second run without overwrite collides
        let err = generate_synthetic_dataset(
            &trainer.g,
            &trainer.g_ws,
            &dict,
            &params,
            5,
            42,
            dir.path(),
            false,
        );
        assert!(matches!(err, Err(Error::OutputExists(_))));

        // count 0 -> empty manifest, no files
        let empty_dir = tempfile::tempdir().unwrap();
        let empty = generate_synthetic_dataset(
            &trainer.g,
            &trainer.g_ws,
            &dict,
            &params,
            0,
            1,
            empty_dir.path(),
            false,
        )
        .unwrap();
        assert!(empty.records.is_empty());
        let files: Vec<_> = std::fs::read_dir(empty_dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".png"))
            .collect();
        assert!(files.is_empty());
    }
}
