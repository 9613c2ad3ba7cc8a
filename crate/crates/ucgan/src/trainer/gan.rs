use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{StepReport, TrainConfig, TrainerError};
use crate::autodiff::{AdamOptimizer, Scalar, Tape, Tensor, ValueId};
use crate::latent::{sample_baseline, sample_latent, LatentSpaceKind};
use crate::losses::{
    began_losses_on_tape, entropy_loss_on_tape, latent_identity_on_tape, loss_max_pool_on_tape,
    recon_vector_map_on_tape, softmax_cross_entropy_on_tape, BeganState, LossMixerState,
};
use crate::models::{
    build_discriminator, build_encoder, build_generator, build_vector_discriminator,
    build_vector_encoder, build_vector_generator, ForwardOpts, ModelConfig, Network,
    RunningUpdate, TapeBinding,
};

const SEED_G: u64 = 1;
const SEED_D: u64 = 2;
const SEED_LATENT: u64 = 0x4c41544e;

/// One training batch of real samples. `shape` is `[n, 3, r, r]` for images
/// or `[n, 2]` for vector-mode points; `attrs` carries the conditioning
/// rows and `attr_classes` the class index per attribute per sample (both
/// empty in vector mode).
#[derive(Debug, Clone)]
pub struct GanBatch<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub attrs: Option<Vec<T>>,
    pub attr_classes: Vec<Vec<usize>>,
}

/// Which optimizer application runs when; the step is read-before-write, so
/// every order produces bit-identical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Generator,
    Discriminator,
}

enum Mode {
    Images { cfg: ModelConfig },
    Vectors { d: usize },
}

/// The fully built per-step graph: objective roots, term values, parameter
/// bindings, and the batch-statistics observations to fold in afterwards.
/// Exposed so tests can differentiate individual objectives and inspect
/// which parameters they reach.
pub struct StepGraph<T> {
    pub be: TapeBinding,
    pub bg: TapeBinding,
    pub bd: TapeBinding,
    pub gamma: ValueId,
    pub l_real: ValueId,
    pub l_fake: ValueId,
    pub l_d: ValueId,
    pub l_g: ValueId,
    pub l_e: ValueId,
    pub recon: Option<ValueId>,
    pub latent_gen: Option<ValueId>,
    pub latent_recon: Option<ValueId>,
    pub entropy: ValueId,
    pub attr: Option<ValueId>,
    ru_e: Vec<RunningUpdate<T>>,
    ru_g: Vec<RunningUpdate<T>>,
    ru_d: Vec<RunningUpdate<T>>,
}

/// Holds the four players plus every piece of mutable training state:
/// optimizers, the equilibrium controller, the loss mixer with its
/// learnable gains, and the latent sampling stream.
pub struct GanTrainer<T: Scalar> {
    mode: Mode,
    cfg: TrainConfig,
    e: Network<T>,
    g: Network<T>,
    d: Network<T>,
    a: Option<Network<T>>,
    began: BeganState,
    mixer: LossMixerState,
    gammas: Vec<T>,
    opt_e: AdamOptimizer<T>,
    opt_g: AdamOptimizer<T>,
    opt_d: AdamOptimizer<T>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<T: Scalar> GanTrainer<T> {
    /// Conditional image pipeline. `attr_net` is the pretrained classifier;
    /// it stays frozen and is only required when the guidance term is on.
    pub fn for_images(
        model_cfg: &ModelConfig,
        attr_net: Option<Network<T>>,
        cfg: TrainConfig,
    ) -> Result<Self, TrainerError> {
        cfg.validate()?;
        model_cfg.validate()?;
        if model_cfg.attr_width() == 0 {
            return Err(TrainerError::BadConfig(
                "image mode needs at least one conditioning attribute".into(),
            ));
        }
        if cfg.attr_weight > 0.0 && attr_net.is_none() {
            return Err(TrainerError::BadConfig(
                "attr_weight > 0 needs a pretrained attribute classifier".into(),
            ));
        }
        let e = build_encoder(model_cfg, cfg.seed)?;
        let g = build_generator(model_cfg, cfg.seed.wrapping_add(SEED_G))?;
        let d = build_discriminator(model_cfg, cfg.seed.wrapping_add(SEED_D))?;
        let m = Mode::Images {
            cfg: model_cfg.clone(),
        };
        Ok(Self::assemble(m, e, g, d, attr_net, cfg))
    }

    /// Vector mode for the ring experiments: dense networks over plain
    /// 2-vectors, no conditioning, no classifier. The attribute-guidance
    /// term does not exist here regardless of its weight.
    pub fn for_vectors(d: usize, hidden: usize, cfg: TrainConfig) -> Result<Self, TrainerError> {
        cfg.validate()?;
        let e = build_vector_encoder(d, hidden, cfg.seed);
        let g = build_vector_generator(d, hidden, cfg.seed.wrapping_add(SEED_G));
        let dd = build_vector_discriminator(d, hidden, cfg.seed.wrapping_add(SEED_D));
        Ok(Self::assemble(Mode::Vectors { d }, e, g, dd, None, cfg))
    }

    fn assemble(
        mode: Mode,
        e: Network<T>,
        g: Network<T>,
        d: Network<T>,
        a: Option<Network<T>>,
        cfg: TrainConfig,
    ) -> Self {
        let gamma_count = Self::term_count(&mode, &cfg, a.is_some());
        Self {
            began: BeganState::with_params(cfg.lambda_k, cfg.gamma_b),
            mixer: LossMixerState::with_rho(gamma_count, cfg.mixer_rho),
            gammas: vec![T::ONE; gamma_count],
            opt_e: AdamOptimizer::new(cfg.adam.clone()),
            opt_g: AdamOptimizer::new(cfg.adam.clone()),
            opt_d: AdamOptimizer::new(cfg.adam.clone()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_LATENT)),
            step: 0,
            mode,
            cfg,
            e,
            g,
            d,
            a,
        }
    }

    /// Generator-objective components in mix order: adversarial, image
    /// identity, latent identity on samples, latent identity on
    /// reconstructions, attribute guidance. Zero-weight terms are absent.
    fn term_count(mode: &Mode, cfg: &TrainConfig, has_a: bool) -> usize {
        let mut m = 1;
        if cfg.recon_weight > 0.0 {
            m += 1;
        }
        if cfg.latent_gen_weight > 0.0 {
            m += 1;
        }
        if cfg.latent_recon_weight > 0.0 {
            m += 1;
        }
        if cfg.attr_weight > 0.0 && has_a && matches!(mode, Mode::Images { .. }) {
            m += 1;
        }
        m
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Network<T> {
        &self.e
    }

    pub fn generator(&self) -> &Network<T> {
        &self.g
    }

    pub fn discriminator(&self) -> &Network<T> {
        &self.d
    }

    pub fn attr_classifier(&self) -> Option<&Network<T>> {
        self.a.as_ref()
    }

    pub fn began(&self) -> &BeganState {
        &self.began
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.gammas.iter().map(|g| g.to_f64()).collect()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    fn latent_pairs(&self) -> usize {
        match &self.mode {
            Mode::Images { cfg } => cfg.d,
            Mode::Vectors { d } => *d,
        }
    }

    fn is_image_mode(&self) -> bool {
        matches!(self.mode, Mode::Images { .. })
    }

    /// `n` latent rows of width `2d` from the configured space.
    pub fn draw_latents(&mut self, n: usize) -> Vec<T> {
        let d = self.latent_pairs();
        let mut out = Vec::with_capacity(n * 2 * d);
        for _ in 0..n {
            match self.cfg.latent_kind {
                LatentSpaceKind::UnitComplex => {
                    out.extend(sample_latent::<T, _>(d, &mut self.rng).into_values());
                }
                kind => out.extend(
                    sample_baseline::<T, _>(kind, 2 * d, &mut self.rng)
                        .expect("baseline latent kind"),
                ),
            }
        }
        out
    }

    fn check_batch(&self, batch: &GanBatch<T>) -> Result<(usize, usize), TrainerError> {
        let bad = |msg: String| Err(TrainerError::BadBatch(msg));
        if batch.shape.len() < 2 || batch.shape[0] < 2 {
            return bad(format!("batch shape {:?} needs n >= 2", batch.shape));
        }
        let n = batch.shape[0];
        if batch.data.len() != batch.shape.iter().product::<usize>() {
            return bad(format!(
                "data length {} vs shape {:?}",
                batch.data.len(),
                batch.shape
            ));
        }
        match &self.mode {
            Mode::Images { cfg } => {
                let want = vec![n, 3, cfg.resolution, cfg.resolution];
                if batch.shape != want {
                    return bad(format!("image batch shape {:?}, want {want:?}", batch.shape));
                }
                let aw = cfg.attr_width();
                match &batch.attrs {
                    Some(a) if a.len() == n * aw => {}
                    Some(a) => {
                        return bad(format!(
                            "attr rows hold {} values, want {}",
                            a.len(),
                            n * aw
                        ))
                    }
                    None => return bad("image batch without conditioning rows".into()),
                }
                if self.cfg.attr_weight > 0.0 && self.a.is_some() {
                    if batch.attr_classes.len() != cfg.attributes.len()
                        || batch.attr_classes.iter().any(|c| c.len() != n)
                    {
                        return bad("attribute class lists do not match the batch".into());
                    }
                }
                Ok((n, aw))
            }
            Mode::Vectors { .. } => {
                if batch.shape[1..] != [2] {
                    return bad(format!("vector batch shape {:?}, want [n, 2]", batch.shape));
                }
                Ok((n, 0))
            }
        }
    }

    /// Builds the whole step graph on `tape`: every forward pass, every
    /// objective. Reads-only with respect to parameters; the latent stream,
    /// the mixer state, and the controller value it bakes in as a constant
    /// reflect the pre-step state.
    pub fn build_step_graph(
        &mut self,
        tape: &mut Tape<T>,
        batch: &GanBatch<T>,
    ) -> Result<StepGraph<T>, TrainerError> {
        let (n, aw) = self.check_batch(batch)?;
        let d2 = 2 * self.latent_pairs();
        let x = tape.constant(batch.shape.clone(), batch.data.clone());
        let attrs = batch
            .attrs
            .as_ref()
            .map(|a| tape.constant(vec![n, aw], a.clone()));

        let be = self.e.bind(tape, true);
        let bg = self.g.bind(tape, true);
        let bd = self.d.bind(tape, true);
        // frozen copy: the latent-identity terms flow through these leaves
        // and stop there
        let bef = self.e.bind(tape, false);

        let mut o = ForwardOpts::train();
        let (e_x, ru_e) = self.e.forward(tape, &be, x, &mut o);
        let angles = tape.pair_angles(e_x);
        let entropy = entropy_loss_on_tape(tape, angles, self.cfg.hist_bins);

        let g_input = |tape: &mut Tape<T>, z: ValueId| match attrs {
            Some(a) => tape.concat(&[z, a], 1),
            None => z,
        };
        let image_mode = self.is_image_mode();
        let recon_map = move |tape: &mut Tape<T>, target: ValueId, out: ValueId| {
            if image_mode {
                tape.recon_image_map(target, out)
            } else {
                recon_vector_map_on_tape(tape, target, out)
            }
        };

        let mut ru_g: Vec<RunningUpdate<T>> = Vec::new();

        // image identity: x against its reconstruction through E then G
        let recon = if self.cfg.recon_weight > 0.0 {
            let gin = g_input(tape, e_x);
            let mut o = ForwardOpts::train();
            let (g_recon, ru) = self.g.forward(tape, &bg, gin, &mut o);
            ru_g.extend(ru);
            let map = recon_map(tape, x, g_recon);
            Some(loss_max_pool_on_tape(tape, map, self.cfg.keep_ratio)?)
        } else {
            None
        };

        // adversarial branch on sampled latents
        let z = tape.constant(vec![n, d2], self.draw_latents(n));
        let gin_z = g_input(tape, z);
        let mut o = ForwardOpts::train();
        let (g_z, ru) = self.g.forward(tape, &bg, gin_z, &mut o);
        ru_g.extend(ru);

        let mut od = ForwardOpts {
            train: true,
            rng: None,
            attrs,
        };
        let (d_x, ru_d1) = self.d.forward(tape, &bd, x, &mut od);
        let mut od = ForwardOpts {
            train: true,
            rng: None,
            attrs,
        };
        let (d_gz, ru_d2) = self.d.forward(tape, &bd, g_z, &mut od);
        let map_real = recon_map(tape, x, d_x);
        let l_real = loss_max_pool_on_tape(tape, map_real, self.cfg.keep_ratio)?;
        let map_fake = recon_map(tape, g_z, d_gz);
        let l_fake = loss_max_pool_on_tape(tape, map_fake, self.cfg.keep_ratio)?;
        let l_d = began_losses_on_tape(tape, l_real, l_fake, self.began.k_t());
        let mut ru_d = ru_d1;
        ru_d.extend(ru_d2);

        // latent identity, sampled side: re-encode G(z) through frozen E
        let latent_gen = if self.cfg.latent_gen_weight > 0.0 {
            let mut o = ForwardOpts::train();
            let (e_gz, _) = self.e.forward(tape, &bef, g_z, &mut o);
            Some(latent_identity_on_tape(tape, e_gz, z))
        } else {
            None
        };

        // latent identity, reconstruction side: the encoder output is
        // stop-gradiented both as the generator input and as the target, so
        // this term reaches G alone. Batch statistics of this extra G pass
        // duplicate the identity pass and are not folded twice.
        let latent_recon = if self.cfg.latent_recon_weight > 0.0 {
            let sg_e_x = tape.stop_gradient(e_x);
            let gin = g_input(tape, sg_e_x);
            let mut o = ForwardOpts::train();
            let (g_r8, ru) = self.g.forward(tape, &bg, gin, &mut o);
            if recon.is_none() {
                ru_g.extend(ru);
            }
            let mut o = ForwardOpts::train();
            let (e_gr, _) = self.e.forward(tape, &bef, g_r8, &mut o);
            Some(latent_identity_on_tape(tape, e_gr, sg_e_x))
        } else {
            None
        };

        // attribute guidance through the frozen classifier, on generated
        // images conditioned with the batch's labels
        let attr = match (&self.a, self.cfg.attr_weight > 0.0) {
            (Some(a), true) => {
                let ba = a.bind(tape, false);
                let mut oa = ForwardOpts::eval();
                let (outs, _) = a.forward_multi(tape, &ba, g_z, &mut oa);
                let mut acc: Option<ValueId> = None;
                for (out, classes) in outs.iter().zip(&batch.attr_classes) {
                    let ce = softmax_cross_entropy_on_tape(tape, *out, classes)?;
                    acc = Some(match acc {
                        Some(p) => tape.add(p, ce),
                        None => ce,
                    });
                }
                acc
            }
            _ => None,
        };

        // generator composite through the adaptive mixer
        let mut terms = vec![l_fake];
        let weighted = |tape: &mut Tape<T>, id: ValueId, w: f64| tape.scale(id, T::from_f64(w));
        if let Some(t) = recon {
            let w = self.cfg.recon_weight;
            terms.push(weighted(tape, t, w));
        }
        if let Some(t) = latent_gen {
            let w = self.cfg.latent_gen_weight;
            terms.push(weighted(tape, t, w));
        }
        if let Some(t) = latent_recon {
            let w = self.cfg.latent_recon_weight;
            terms.push(weighted(tape, t, w));
        }
        if let Some(t) = attr {
            let w = self.cfg.attr_weight;
            terms.push(weighted(tape, t, w));
        }
        assert_eq!(terms.len(), self.gammas.len(), "term plan changed mid-run");
        let gamma = tape.leaf_data(vec![self.gammas.len()], self.gammas.clone(), true);
        let l_g = crate::losses::adaptive_mix_on_tape(tape, &mut self.mixer, &terms, gamma)?;

        // encoder objective: identity plus histogram uniformity, both on
        // real samples only
        let l_e = {
            let mut acc: Option<ValueId> = None;
            if let Some(t) = recon {
                acc = Some(weighted(tape, t, self.cfg.recon_weight));
            }
            if self.cfg.entropy_weight > 0.0 {
                let t = weighted(tape, entropy, self.cfg.entropy_weight);
                acc = Some(match acc {
                    Some(p) => tape.add(p, t),
                    None => t,
                });
            }
            acc.unwrap_or_else(|| tape.constant_scalar(T::ZERO))
        };

        Ok(StepGraph {
            be,
            bg,
            bd,
            gamma,
            l_real,
            l_fake,
            l_d,
            l_g,
            l_e,
            recon,
            latent_gen,
            latent_recon,
            entropy,
            attr,
            ru_e,
            ru_g,
            ru_d,
        })
    }

    pub fn gan_step(&mut self, batch: &GanBatch<T>) -> Result<StepReport, TrainerError> {
        self.gan_step_ordered(
            batch,
            [Role::Discriminator, Role::Generator, Role::Encoder],
        )
    }

    /// One simultaneous update. All three objectives differentiate the same
    /// graph; every gradient is materialized before the first parameter
    /// write, so `order` cannot change the outcome.
    pub fn gan_step_ordered(
        &mut self,
        batch: &GanBatch<T>,
        order: [Role; 3],
    ) -> Result<StepReport, TrainerError> {
        let t0 = Instant::now();
        let step = self.step + 1;
        let mut tape = Tape::new();
        let graph = self.build_step_graph(&mut tape, batch)?;

        let v = |id: ValueId| tape.scalar_value(id).to_f64();
        let opt_v = |id: Option<ValueId>| id.map(&v).unwrap_or(0.0);
        let (l_real, l_fake) = (v(graph.l_real), v(graph.l_fake));
        let (l_d, l_g, l_e) = (v(graph.l_d), v(graph.l_g), v(graph.l_e));
        let recon_id = opt_v(graph.recon);
        let latent_gen = opt_v(graph.latent_gen);
        let latent_recon = opt_v(graph.latent_recon);
        let entropy = v(graph.entropy);
        let attr = opt_v(graph.attr);
        let parts = [
            l_real,
            l_fake,
            l_d,
            l_g,
            l_e,
            recon_id,
            latent_gen,
            latent_recon,
            entropy,
            attr,
        ];
        if parts.iter().any(|p| !p.is_finite()) {
            return Err(TrainerError::NonFiniteLoss {
                step,
                detail: format!(
                    "L_real {l_real}, L_fake {l_fake}, L_D {l_d}, L_G {l_g}, L_E {l_e}, \
                     eq3 {recon_id}, eq8a {latent_gen}, eq8b {latent_recon}, \
                     entropy {entropy}, attr {attr}"
                ),
            });
        }

        let gd = tape.backward(graph.l_d)?;
        let gg = tape.backward(graph.l_g)?;
        let ge = tape.backward(graph.l_e)?;
        let grads_d = self.d.collect_grads(&gd, &graph.bd);
        let grads_g = self.g.collect_grads(&gg, &graph.bg);
        let grads_e = self.e.collect_grads(&ge, &graph.be);
        let gamma_grad = gg.dense(graph.gamma, self.gammas.len());

        // writes begin here
        for role in order {
            match role {
                Role::Discriminator => {
                    self.opt_d.begin_step();
                    self.d.apply_grads(&mut self.opt_d, &grads_d)?;
                }
                Role::Generator => {
                    self.opt_g.begin_step();
                    self.g.apply_grads(&mut self.opt_g, &grads_g)?;
                    self.opt_g
                        .update("G/mix/gamma", &mut self.gammas, &gamma_grad)?;
                }
                Role::Encoder => {
                    self.opt_e.begin_step();
                    self.e.apply_grads(&mut self.opt_e, &grads_e)?;
                }
            }
        }
        self.e.apply_running_updates(&graph.ru_e);
        self.g.apply_running_updates(&graph.ru_g);
        self.d.apply_running_updates(&graph.ru_d);
        self.began.update(l_real, l_fake)?;
        self.step = step;

        Ok(StepReport {
            step,
            l_real,
            l_fake,
            l_d,
            l_g,
            recon_id,
            latent_gen,
            latent_recon,
            entropy,
            attr,
            k_t: self.began.k_t(),
            m_t: self.began.m_t(),
            gammas: self.gammas(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    // ---- persistence -------------------------------------------------

    /// All four networks plus the scalar training state in one entry list.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.e.checkpoint_entries();
        out.extend(self.g.checkpoint_entries());
        out.extend(self.d.checkpoint_entries());
        if let Some(a) = &self.a {
            out.extend(a.checkpoint_entries());
        }
        let scalars = |v: f64| Tensor::from_parts(vec![1], vec![v as f32]);
        out.push((
            "trainer/gamma".into(),
            Tensor::from_parts(
                vec![self.gammas.len()],
                self.gammas.iter().map(|g| g.to_f64() as f32).collect(),
            ),
        ));
        if let Some(s) = self.mixer.smoothed() {
            out.push((
                "trainer/mixer_s".into(),
                Tensor::from_parts(vec![s.len()], s.iter().map(|v| *v as f32).collect()),
            ));
        }
        out.push(("trainer/k_t".into(), scalars(self.began.k_t())));
        out.push(("trainer/m_t".into(), scalars(self.began.m_t())));
        out.push(("trainer/step".into(), scalars(self.step as f64)));
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TrainerError> {
        crate::autodiff::save_checkpoint(path, &self.checkpoint_entries())?;
        Ok(())
    }

    /// Restores a checkpoint written by [`GanTrainer::save`] into a trainer
    /// built with the same configuration. Optimizer moments restart fresh.
    /// Classifier weights in the file are skipped when the trainer was built
    /// without one, so guided checkpoints can be reopened just to sample.
    pub fn load(&mut self, path: &std::path::Path) -> Result<(), TrainerError> {
        let entries = crate::autodiff::load_checkpoint(path)?;
        let mut by_net: std::collections::BTreeMap<&str, Vec<(String, Tensor<f32>)>> =
            std::collections::BTreeMap::new();
        for (name, tensor) in entries {
            let prefix = name.split('/').next().unwrap_or("").to_string();
            match prefix.as_str() {
                "E" | "G" | "D" | "A" => by_net
                    .entry(match prefix.as_str() {
                        "E" => "E",
                        "G" => "G",
                        "D" => "D",
                        _ => "A",
                    })
                    .or_default()
                    .push((name, tensor)),
                "trainer" => match name.as_str() {
                    "trainer/gamma" => {
                        if tensor.numel() != self.gammas.len() {
                            return Err(TrainerError::BadConfig(format!(
                                "checkpoint holds {} mixer gains, this run uses {}",
                                tensor.numel(),
                                self.gammas.len()
                            )));
                        }
                        self.gammas = tensor
                            .data()
                            .iter()
                            .map(|v| T::from_f64(*v as f64))
                            .collect();
                    }
                    "trainer/mixer_s" => {
                        self.mixer
                            .set_smoothed(tensor.data().iter().map(|v| *v as f64).collect());
                    }
                    "trainer/k_t" => self.began.set_k_t(tensor.data()[0] as f64),
                    "trainer/m_t" => {}
                    "trainer/step" => self.step = tensor.data()[0] as usize,
                    other => {
                        return Err(TrainerError::BadConfig(format!(
                            "unknown trainer state entry {other}"
                        )))
                    }
                },
                other => {
                    return Err(TrainerError::BadConfig(format!(
                        "checkpoint entry {name} has unknown prefix {other}"
                    )))
                }
            }
        }
        for (net, entries) in by_net {
            match net {
                "E" => self.e.load_entries(&entries)?,
                "G" => self.g.load_entries(&entries)?,
                "D" => self.d.load_entries(&entries)?,
                // classifier weights in the file are irrelevant when this
                // run carries no classifier (sampling, evaluation)
                _ => {
                    if let Some(a) = &mut self.a {
                        a.load_entries(&entries)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_ring_gaussians;

    fn ring_batch(n: usize, seed: u64) -> GanBatch<f64> {
        let pts = gen_ring_gaussians(8, 2.0, 0.05, n, seed);
        let data = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        GanBatch {
            data,
            shape: vec![n, 2],
            attrs: None,
            attr_classes: vec![],
        }
    }

    fn vector_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch: 8,
            total_steps: 10,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn latent_identity_terms_never_reach_the_encoder() {
        let cfg = TrainConfig {
            recon_weight: 0.0,
            entropy_weight: 0.0,
            attr_weight: 0.0,
            ..vector_cfg(4)
        };
        let mut t = GanTrainer::<f64>::for_vectors(3, 16, cfg).unwrap();
        for trial in 0..5 {
            let batch = ring_batch(8, 100 + trial);
            let mut tape = Tape::new();
            let g = t.build_step_graph(&mut tape, &batch).unwrap();
            assert!(g.latent_gen.is_some() && g.latent_recon.is_some());
            let gg = tape.backward(g.l_g).unwrap();
            for (name, grad) in t.encoder().collect_grads(&gg, &g.be) {
                assert!(
                    grad.iter().all(|&v| v == 0.0),
                    "trial {trial}: generator objective leaked into {name}"
                );
            }
            let ge = tape.backward(g.l_e).unwrap();
            for (name, grad) in t.encoder().collect_grads(&ge, &g.be) {
                assert!(
                    grad.iter().all(|&v| v == 0.0),
                    "trial {trial}: empty encoder objective moved {name}"
                );
            }
            // the same terms do reach the generator
            let gg_g = t.generator().collect_grads(&gg, &g.bg);
            let total: f64 = gg_g
                .values()
                .flat_map(|v| v.iter())
                .map(|v| v.abs())
                .sum();
            assert!(total > 0.0, "generator received no gradient");
        }
    }

    #[test]
    fn with_identity_losses_on_the_encoder_does_learn() {
        let mut t = GanTrainer::<f64>::for_vectors(3, 16, vector_cfg(5)).unwrap();
        let batch = ring_batch(8, 3);
        let mut tape = Tape::new();
        let g = t.build_step_graph(&mut tape, &batch).unwrap();
        let ge = tape.backward(g.l_e).unwrap();
        let total: f64 = t
            .encoder()
            .collect_grads(&ge, &g.be)
            .values()
            .flat_map(|v| v.iter())
            .map(|v| v.abs())
            .sum();
        assert!(total > 0.0, "real-sample objectives must reach the encoder");
    }

    #[test]
    fn update_order_does_not_change_anything() {
        let mut t1 = GanTrainer::<f64>::for_vectors(2, 12, vector_cfg(7)).unwrap();
        let mut t2 = GanTrainer::<f64>::for_vectors(2, 12, vector_cfg(7)).unwrap();
        for step in 0..3 {
            let batch = ring_batch(6, 40 + step);
            let r1 = t1.gan_step(&batch).unwrap();
            let r2 = t2
                .gan_step_ordered(
                    &batch,
                    [Role::Encoder, Role::Generator, Role::Discriminator],
                )
                .unwrap();
            assert!(r1.same_values(&r2), "step {step} diverged");
        }
        for (a, b) in [(&t1.e, &t2.e), (&t1.g, &t2.g), (&t1.d, &t2.d)] {
            for name in a.param_names() {
                assert_eq!(a.param(name).data(), b.param(name).data(), "{name}");
            }
        }
        assert_eq!(t1.gammas(), t2.gammas());
        assert_eq!(t1.began().k_t(), t2.began().k_t());
    }

    #[test]
    fn short_run_stays_finite_with_bounded_k() {
        let mut t = GanTrainer::<f64>::for_vectors(3, 16, vector_cfg(11)).unwrap();
        for step in 0..25 {
            let batch = ring_batch(8, 500 + step);
            let r = t.gan_step(&batch).unwrap();
            assert!(r.is_finite(), "step {step}: {r:?}");
            assert!((0.0..=1.0).contains(&r.k_t), "k_t {}", r.k_t);
            assert!(r.entropy <= 1e-9, "negative entropy expected, got {}", r.entropy);
            assert_eq!(r.step, step as usize + 1);
            assert_eq!(r.gammas.len(), 4);
        }
    }

    #[test]
    fn equal_seeds_reproduce_the_run() {
        let mut t1 = GanTrainer::<f64>::for_vectors(2, 12, vector_cfg(21)).unwrap();
        let mut t2 = GanTrainer::<f64>::for_vectors(2, 12, vector_cfg(21)).unwrap();
        for step in 0..6 {
            let batch = ring_batch(6, 900 + step);
            let r1 = t1.gan_step(&batch).unwrap();
            let r2 = t2.gan_step(&batch).unwrap();
            assert!(r1.same_values(&r2));
        }
        for name in t1.g.param_names() {
            assert_eq!(t1.g.param(name).data(), t2.g.param(name).data());
        }
    }

    #[test]
    fn checkpoint_round_trips_trainer_state() {
        let dir = std::env::temp_dir().join(format!("ucgan-ganckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut t = GanTrainer::<f32>::for_vectors(2, 12, vector_cfg(31)).unwrap();
        for step in 0..4 {
            let batch = ring_batch(6, 700 + step);
            let bat32 = GanBatch {
                data: batch.data.iter().map(|v| *v as f32).collect(),
                shape: batch.shape,
                attrs: None,
                attr_classes: vec![],
            };
            t.gan_step(&bat32).unwrap();
        }
        let path = dir.join("state.ckpt");
        t.save(&path).unwrap();
        let mut fresh = GanTrainer::<f32>::for_vectors(2, 12, vector_cfg(99)).unwrap();
        fresh.load(&path).unwrap();
        for name in t.e.param_names() {
            assert_eq!(t.e.param(name).data(), fresh.e.param(name).data());
        }
        assert_eq!(t.gammas(), fresh.gammas());
        // scalar state is stored at file precision
        assert_eq!(t.began().k_t() as f32, fresh.began().k_t() as f32);
        assert_eq!(t.step_count(), fresh.step_count());
        let s32 = |m: Option<&[f64]>| m.map(|s| s.iter().map(|v| *v as f32).collect::<Vec<_>>());
        assert_eq!(s32(t.mixer.smoothed()), s32(fresh.mixer.smoothed()));
    }

    #[test]
    fn vector_batches_are_validated() {
        let mut t = GanTrainer::<f64>::for_vectors(2, 12, vector_cfg(1)).unwrap();
        let bad = GanBatch {
            data: vec![0.0; 6],
            shape: vec![2, 3],
            attrs: None,
            attr_classes: vec![],
        };
        assert!(matches!(
            t.gan_step(&bad),
            Err(TrainerError::BadBatch(_))
        ));
        let tiny = GanBatch {
            data: vec![0.0; 2],
            shape: vec![1, 2],
            attrs: None,
            attr_classes: vec![],
        };
        assert!(t.gan_step(&tiny).is_err());
    }

    #[test]
    fn image_mode_smoke_test() {
        use crate::models::{AttributeDef, ModelConfig};
        let model_cfg = ModelConfig {
            resolution: 8,
            d: 2,
            base_channels: 4,
            channel_cap: 8,
            attributes: vec![AttributeDef::categorical("kind", 2)],
        };
        let cfg = TrainConfig {
            batch: 2,
            attr_weight: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut t = GanTrainer::<f32>::for_images(&model_cfg, None, cfg).unwrap();
        let n = 2;
        let data: Vec<f32> = (0..n * 3 * 8 * 8).map(|i| (i % 11) as f32 / 11.0).collect();
        let batch = GanBatch {
            data,
            shape: vec![n, 3, 8, 8],
            attrs: Some(vec![1.0, 0.0, 0.0, 1.0]),
            attr_classes: vec![],
        };
        let r = t.gan_step(&batch).unwrap();
        assert!(r.is_finite(), "{r:?}");
        assert!(r.k_t >= 0.0 && r.k_t <= 1.0);

        let no_attrs = GanBatch {
            attrs: None,
            ..batch.clone()
        };
        assert!(matches!(
            t.gan_step(&no_attrs),
            Err(TrainerError::BadBatch(_))
        ));
    }
}
