//! Style-conditioned conditional mean generation, the OT-CFM training pair,
//! the flow-matching loss, and first-order Euler sampling of the learned
//! vector field.
//!
//! The conditional path is x_t = (1 − (1−σ_min)t)·x₀ + t·x₁ with constant
//! conditional velocity u_t = x₁ − (1−σ_min)·x₀; sampling integrates the
//! field from seeded Gaussian noise with n uniform Euler steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{
    bind_params, sinusoidal_time_embedding, Activation, Conv1d, Embedding, Linear, ParamSet,
};
use crate::rng::normal_tensor;
use crate::scalar::{fl, fu, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OtCfmConfig {
    pub sigma_min: f64,
    pub n_euler_steps: usize,
}

impl Default for OtCfmConfig {
    fn default() -> Self {
        OtCfmConfig {
            sigma_min: 1e-4,
            n_euler_steps: 10,
        }
    }
}

impl OtCfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config("sigma_min must be in (0, 1)".into()));
        }
        if self.n_euler_steps == 0 {
            return Err(Error::Config("n_euler_steps must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Linear path point and its constant conditional velocity:
/// x_t = (1 − (1−σ)t)·x₀ + t·x₁, u_t = x₁ − (1−σ)·x₀.
pub fn ot_cfm_pair<F: Scalar>(
    x0: &Tensor<F>,
    x1: &Tensor<F>,
    t: F,
    cfg: &OtCfmConfig,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if x0.shape() != x1.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} vs target {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    if t < F::zero() || t > F::one() {
        return Err(Error::Domain("flow step t must lie in [0, 1]".into()));
    }
    let sigma: F = fl(cfg.sigma_min);
    let keep = F::one() - (F::one() - sigma) * t;
    let mut x_t = x0.map(|v| keep * v);
    x_t.add_assign_scaled(x1, t);
    let mut u_t = x1.clone();
    u_t.add_assign_scaled(x0, -(F::one() - sigma));
    Ok((x_t, u_t))
}

/// A conditional vector field v(x | μ; t).
pub trait VectorField<F: Scalar> {
    fn eval(&self, x: &Tensor<F>, mu: &Tensor<F>, t: F) -> Result<Tensor<F>>;
}

/// Wraps a closure as a vector field (tests, oracles).
pub struct FnField<G>(pub G);

impl<F: Scalar, G> VectorField<F> for FnField<G>
where
    G: Fn(&Tensor<F>, &Tensor<F>, F) -> Tensor<F>,
{
    fn eval(&self, x: &Tensor<F>, mu: &Tensor<F>, t: F) -> Result<Tensor<F>> {
        Ok((self.0)(x, mu, t))
    }
}

/// Monte-Carlo flow-matching loss over explicit (t, x₀) draws:
/// mean over draws of mean_elements ‖v(x_t | μ; t) − u_t‖².
pub fn cfm_loss_mc<F: Scalar>(
    field: &impl VectorField<F>,
    mu: &Tensor<F>,
    x1: &Tensor<F>,
    draws: &[(F, Tensor<F>)],
    cfg: &OtCfmConfig,
) -> Result<F> {
    if mu.shape() != x1.shape() {
        return Err(Error::Shape("μ and target shapes differ".into()));
    }
    if draws.is_empty() {
        return Err(Error::Domain("cfm loss needs at least one draw".into()));
    }
    let mut total = F::zero();
    for (t, x0) in draws {
        let (x_t, u_t) = ot_cfm_pair(x0, x1, *t, cfg)?;
        let v = field.eval(&x_t, mu, *t)?;
        if v.shape() != u_t.shape() {
            return Err(Error::Shape("field output shape".into()));
        }
        let mut sum = F::zero();
        for (&a, &b) in v.data().iter().zip(u_t.data()) {
            let d = a - b;
            sum += d * d;
        }
        total += sum / fu(v.len());
    }
    Ok(total / fu(draws.len()))
}

/// Flow-matching loss with caller-supplied samplers for t and the noise.
pub fn cfm_loss<F: Scalar>(
    field: &impl VectorField<F>,
    mu: &Tensor<F>,
    x1: &Tensor<F>,
    noise_sampler: &mut dyn FnMut(usize, usize) -> Tensor<F>,
    t_sampler: &mut dyn FnMut() -> F,
    n_draws: usize,
    cfg: &OtCfmConfig,
) -> Result<F> {
    let draws: Vec<(F, Tensor<F>)> = (0..n_draws)
        .map(|_| (t_sampler(), noise_sampler(x1.rows(), x1.cols())))
        .collect();
    cfm_loss_mc(field, mu, x1, &draws, cfg)
}

/// First-order Euler integration x ← x + (1/n)·v(x | μ; t_k), t_k = k/n,
/// from a caller-supplied start state.
pub fn euler_integrate<F: Scalar>(
    field: &impl VectorField<F>,
    mu: &Tensor<F>,
    cfg: &OtCfmConfig,
    x0: Tensor<F>,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    let n = cfg.n_euler_steps;
    let step: F = fu::<F>(n).recip();
    let mut x = x0;
    for k in 0..n {
        let t: F = fu::<F>(k) / fu(n);
        let v = field.eval(&x, mu, t)?;
        if !v.all_finite() {
            return Err(Error::NonFinite(format!(
                "vector field output at step {k} (t = {t})"
            )));
        }
        x.add_assign_scaled(&v, step);
    }
    Ok(x)
}

/// Euler sampling from seeded Gaussian noise shaped like μ's frame grid.
pub fn euler_sample<F: Scalar>(
    field: &impl VectorField<F>,
    mu: &Tensor<F>,
    cfg: &OtCfmConfig,
    seed: u64,
) -> Result<Tensor<F>> {
    let mut rng = crate::rng::seeded(seed);
    let x0 = normal_tensor(&mut rng, mu.rows(), mu.cols());
    euler_integrate(field, mu, cfg, x0)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DecoderConfig {
    pub base_channels: usize,
    pub mid_channels: usize,
    pub time_dim: usize,
    pub activation: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            base_channels: 32,
            mid_channels: 48,
            time_dim: 32,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FlowConfig {
    pub n_mels: usize,
    /// Width of the pause-augmented hidden rows driving μ.
    pub content_dim: usize,
    pub global_dim: usize,
    pub local_dim: usize,
    pub speaker_dim: usize,
    pub fusion_hidden: usize,
    pub decoder: DecoderConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            n_mels: 80,
            content_dim: 128,
            global_dim: 64,
            local_dim: 16,
            speaker_dim: 16,
            fusion_hidden: 128,
            decoder: DecoderConfig::default(),
        }
    }
}

struct ResBlock {
    t_proj: Linear,
    c1: Conv1d,
    c2: Conv1d,
}

impl ResBlock {
    fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        time_dim: usize,
    ) -> Self {
        ResBlock {
            t_proj: Linear::new(ps, rng, &format!("{name}.t_proj"), time_dim, channels),
            c1: Conv1d::new(ps, rng, &format!("{name}.c1"), channels, channels, 3, 1, 1),
            c2: Conv1d::new(ps, rng, &format!("{name}.c2"), channels, channels, 3, 1, 1),
        }
    }

    fn fwd<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        t_emb: Var,
        act: Activation,
    ) -> Var {
        let bias = self.t_proj.fwd(tape, vars, t_emb);
        let h = tape.add_row_broadcast(x, bias);
        let h = act.apply(tape, h);
        let h = self.c1.fwd(tape, vars, h);
        let h = act.apply(tape, h);
        let h = self.c2.fwd(tape, vars, h);
        tape.add(x, h)
    }
}

/// U-shaped 1-D conv decoder over the frame axis: two downsampling stages, a
/// middle block, two upsampling stages with skip connections, and a
/// time-embedding bias per block.
pub struct UNetDecoder {
    cfg: DecoderConfig,
    in_conv: Conv1d,
    rb_in: ResBlock,
    down1: Conv1d,
    rb_d1: ResBlock,
    down2: Conv1d,
    rb_mid: ResBlock,
    up1: Conv1d,
    rb_u1: ResBlock,
    up2: Conv1d,
    rb_u2: ResBlock,
    out_conv: Conv1d,
}

impl UNetDecoder {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        n_mels: usize,
        cfg: DecoderConfig,
    ) -> Self {
        let b = cfg.base_channels;
        let m = cfg.mid_channels;
        let td = cfg.time_dim;
        UNetDecoder {
            in_conv: Conv1d::new(ps, rng, &format!("{name}.in_conv"), 2 * n_mels, b, 3, 1, 1),
            rb_in: ResBlock::new(ps, rng, &format!("{name}.rb_in"), b, td),
            down1: Conv1d::new(ps, rng, &format!("{name}.down1"), b, m, 3, 2, 1),
            rb_d1: ResBlock::new(ps, rng, &format!("{name}.rb_d1"), m, td),
            down2: Conv1d::new(ps, rng, &format!("{name}.down2"), m, m, 3, 2, 1),
            rb_mid: ResBlock::new(ps, rng, &format!("{name}.rb_mid"), m, td),
            up1: Conv1d::new(ps, rng, &format!("{name}.up1"), 2 * m, m, 3, 1, 1),
            rb_u1: ResBlock::new(ps, rng, &format!("{name}.rb_u1"), m, td),
            up2: Conv1d::new(ps, rng, &format!("{name}.up2"), m + b, b, 3, 1, 1),
            rb_u2: ResBlock::new(ps, rng, &format!("{name}.rb_u2"), b, td),
            out_conv: Conv1d::new(ps, rng, &format!("{name}.out_conv"), b, n_mels, 3, 1, 1),
            cfg,
        }
    }

    pub fn fwd<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        mu: Var,
        t: F,
    ) -> Var {
        let act = self.cfg.activation;
        let t_emb = tape.constant(sinusoidal_time_embedding(t, self.cfg.time_dim));
        let joined = tape.concat_cols(&[x, mu]);
        let h0 = self.in_conv.fwd(tape, vars, joined);
        let h0 = self.rb_in.fwd(tape, vars, h0, t_emb, act);
        let rows0 = tape.value(h0).rows();

        let h1 = act.apply(tape, h0);
        let h1 = self.down1.fwd(tape, vars, h1);
        let h1 = self.rb_d1.fwd(tape, vars, h1, t_emb, act);
        let rows1 = tape.value(h1).rows();

        let h2 = act.apply(tape, h1);
        let h2 = self.down2.fwd(tape, vars, h2);
        let h2 = self.rb_mid.fwd(tape, vars, h2, t_emb, act);

        let u1 = tape.upsample2_rows(h2);
        let u1 = tape.crop_rows(u1, rows1);
        let u1 = tape.concat_cols(&[u1, h1]);
        let u1 = self.up1.fwd(tape, vars, u1);
        let u1 = self.rb_u1.fwd(tape, vars, u1, t_emb, act);

        let u2 = tape.upsample2_rows(u1);
        let u2 = tape.crop_rows(u2, rows0);
        let u2 = tape.concat_cols(&[u2, h0]);
        let u2 = self.up2.fwd(tape, vars, u2);
        let u2 = self.rb_u2.fwd(tape, vars, u2, t_emb, act);

        self.out_conv.fwd(tape, vars, u2)
    }
}

/// Conditional-mean builder plus the vector-field decoder.
pub struct FlowModel {
    pub cfg: FlowConfig,
    speaker_emb: Embedding,
    fuse1: Linear,
    fuse2: Linear,
    out_proj: Linear,
    pub decoder: UNetDecoder,
}

impl FlowModel {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        cfg: FlowConfig,
        n_speakers: usize,
    ) -> Self {
        let fused_in = cfg.content_dim + cfg.local_dim + cfg.global_dim + cfg.speaker_dim;
        FlowModel {
            speaker_emb: Embedding::new(ps, rng, "flow.speaker_emb", n_speakers.max(1), cfg.speaker_dim),
            fuse1: Linear::new(ps, rng, "flow.fuse1", fused_in, cfg.fusion_hidden),
            fuse2: Linear::new(ps, rng, "flow.fuse2", cfg.fusion_hidden, cfg.fusion_hidden),
            out_proj: Linear::new(ps, rng, "flow.out_proj", cfg.fusion_hidden, cfg.n_mels),
            decoder: UNetDecoder::new(ps, rng, "flow.decoder", cfg.n_mels, cfg.decoder.clone()),
            cfg,
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.speaker_emb.vocab
    }

    pub fn speaker_embedding_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        speaker_index: usize,
    ) -> Var {
        self.speaker_emb.fwd(tape, vars, &[speaker_index])
    }

    /// Mean speaker embedding row, for synthesis from a reference mel of an
    /// unknown speaker.
    pub fn mean_speaker_embedding_t<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[Var]) -> Var {
        let table = self.speaker_emb.table();
        let all = vars[table.index()];
        tape.mean_rows(all)
    }

    /// Fuses content rows with style vectors and the speaker embedding, then
    /// upsamples by per-row durations and projects to mel dimension.
    /// Zero durations are clamped to one frame.
    pub fn build_mu_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        h_c: Var,
        a_g: Option<Var>,
        a_l: Option<Var>,
        speaker: Var,
        durations: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let rows = tape.value(h_c).rows();
        if durations.len() != rows {
            return Err(Error::Shape(format!(
                "{} durations for {} content rows",
                durations.len(),
                rows
            )));
        }
        let clamped: Vec<usize> = durations.iter().map(|&d| d.max(1)).collect();
        if clamped.iter().zip(durations).any(|(&c, &d)| c != d) {
            eprintln!("warning: zero duration clamped to 1 frame while building μ");
        }

        let a_l = match a_l {
            Some(v) => {
                if tape.value(v).rows() != rows {
                    return Err(Error::Shape("local style not aligned to content".into()));
                }
                v
            }
            None => tape.constant(Tensor::zeros(rows, self.cfg.local_dim)),
        };
        let a_g_row = match a_g {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(1, self.cfg.global_dim)),
        };
        let a_g_rows = tape.broadcast_row(a_g_row, rows);
        let spk_rows = tape.broadcast_row(speaker, rows);

        let fused = tape.concat_cols(&[h_c, a_l, a_g_rows, spk_rows]);
        let h = self.fuse1.fwd(tape, vars, fused);
        let h = tape.gelu(h);
        let h = self.fuse2.fwd(tape, vars, h);
        let h = tape.tanh(h);
        let up = tape.repeat_rows(h, &clamped);
        let mu = self.out_proj.fwd(tape, vars, up);
        Ok((mu, clamped))
    }

    /// Decoder forward on an existing tape (training path).
    pub fn field_t<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        x: Var,
        mu: Var,
        t: F,
    ) -> Var {
        self.decoder.fwd(tape, vars, x, mu, t)
    }
}

/// Inference-time view of a flow model as a plain vector field.
pub struct FlowField<'a, F: Scalar> {
    pub model: &'a FlowModel,
    pub params: &'a ParamSet<F>,
}

impl<F: Scalar> VectorField<F> for FlowField<'_, F> {
    fn eval(&self, x: &Tensor<F>, mu: &Tensor<F>, t: F) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let vars = bind_params(&mut tape, self.params);
        let xv = tape.constant(x.clone());
        let mv = tape.constant(mu.clone());
        let out = self.model.field_t(&mut tape, &vars, xv, mv, t);
        Ok(tape.value(out).clone())
    }
}

/// Samples a mel spectrogram from a trained flow model.
pub fn synthesize_mel<F: Scalar>(
    model: &FlowModel,
    params: &ParamSet<F>,
    mu: &Tensor<F>,
    cfg: &OtCfmConfig,
    seed: u64,
    frame_shift_s: f64,
) -> Result<MelSpectrogram<F>> {
    let field = FlowField { model, params };
    let frames = euler_sample(&field, mu, cfg, seed)?;
    MelSpectrogram::new(frames, frame_shift_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_matches_hand_values() {
        let cfg = OtCfmConfig {
            sigma_min: 0.1,
            n_euler_steps: 10,
        };
        let x0 = Tensor::scalar(0.0f64);
        let x1 = Tensor::scalar(2.0f64);
        let (x_t, u_t) = ot_cfm_pair(&x0, &x1, 0.5, &cfg).unwrap();
        assert!((x_t.item() - 1.0).abs() < 1e-12);
        assert!((u_t.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn path_endpoints() {
        let cfg = OtCfmConfig::default();
        let mut rng = crate::rng::seeded(3);
        let x0: Tensor<f64> = normal_tensor(&mut rng, 4, 3);
        let x1: Tensor<f64> = normal_tensor(&mut rng, 4, 3);
        let (start, _) = ot_cfm_pair(&x0, &x1, 0.0, &cfg).unwrap();
        assert_eq!(start, x0);
        // ‖x_1-path − x1‖ ≤ σ_min·‖x0‖
        let (end, _) = ot_cfm_pair(&x0, &x1, 1.0, &cfg).unwrap();
        let mut diff = end.clone();
        diff.add_assign_scaled(&x1, -1.0);
        let lhs = diff.frob_norm_sq().sqrt();
        let rhs = cfg.sigma_min * x0.frob_norm_sq().sqrt();
        assert!(lhs <= rhs + 1e-12);
    }

    #[test]
    fn path_is_affine_in_t() {
        let cfg = OtCfmConfig::default();
        let mut rng = crate::rng::seeded(5);
        let x0: Tensor<f64> = normal_tensor(&mut rng, 2, 3);
        let x1: Tensor<f64> = normal_tensor(&mut rng, 2, 3);
        let at = |t: f64| ot_cfm_pair(&x0, &x1, t, &cfg).unwrap().0;
        let (a, b, mid) = (at(0.2), at(0.8), at(0.5));
        for i in 0..a.len() {
            let expect = 0.5 * (a.data()[i] + b.data()[i]);
            assert!((mid.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_rejects_bad_inputs() {
        let cfg = OtCfmConfig::default();
        let a: Tensor<f64> = Tensor::zeros(2, 2);
        let b: Tensor<f64> = Tensor::zeros(2, 3);
        assert!(matches!(
            ot_cfm_pair(&a, &b, 0.5, &cfg),
            Err(Error::Shape(_))
        ));
        let b: Tensor<f64> = Tensor::zeros(2, 2);
        assert!(matches!(
            ot_cfm_pair(&a, &b, 1.5, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let field = FnField(|_x: &Tensor<f64>, _mu: &Tensor<f64>, _t: f64| {
            Tensor::filled(1, 2, 3.0)
        });
        let mu = Tensor::zeros(1, 2);
        for steps in [1usize, 2, 7, 64] {
            let cfg = OtCfmConfig {
                sigma_min: 1e-4,
                n_euler_steps: steps,
            };
            let out = euler_integrate(&field, &mu, &cfg, Tensor::filled(1, 2, 1.0)).unwrap();
            for &v in out.data() {
                assert!((v - 4.0).abs() < 1e-12, "x0 + c regardless of steps");
            }
        }
    }

    #[test]
    fn linear_field_matches_closed_form_and_converges() {
        // v(x) = x from x0 = 1: n steps give (1 + 1/n)^n → e
        let field = FnField(|x: &Tensor<f64>, _mu: &Tensor<f64>, _t: f64| x.clone());
        let mu = Tensor::zeros(1, 1);
        let run = |steps: usize| {
            let cfg = OtCfmConfig {
                sigma_min: 1e-4,
                n_euler_steps: steps,
            };
            euler_integrate(&field, &mu, &cfg, Tensor::scalar(1.0))
                .unwrap()
                .item()
        };
        assert!((run(1) - 2.0).abs() < 1e-12);
        assert!((run(2) - 2.25).abs() < 1e-12);
        let mut prev_err = f64::INFINITY;
        let mut steps = 1;
        while steps <= 64 {
            let err = (run(steps) - std::f64::consts::E).abs();
            assert!(err < prev_err, "halving the step must reduce error");
            prev_err = err;
            steps *= 2;
        }
    }

    #[test]
    fn non_finite_field_aborts_with_diagnostics() {
        let field = FnField(|_x: &Tensor<f64>, _mu: &Tensor<f64>, _t: f64| {
            Tensor::filled(1, 1, f64::NAN)
        });
        let mu = Tensor::zeros(1, 1);
        let cfg = OtCfmConfig::default();
        assert!(matches!(
            euler_integrate(&field, &mu, &cfg, Tensor::scalar(0.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn euler_sampling_is_seed_deterministic() {
        let field = FnField(|x: &Tensor<f64>, mu: &Tensor<f64>, _t: f64| {
            let mut v = mu.clone();
            v.add_assign_scaled(x, -1.0);
            v
        });
        let mu = Tensor::filled(3, 2, 0.7);
        let cfg = OtCfmConfig::default();
        let a = euler_sample(&field, &mu, &cfg, 99).unwrap();
        let b = euler_sample(&field, &mu, &cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = euler_sample(&field, &mu, &cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perfect_field_has_zero_loss_and_zero_field_unit_loss() {
        let cfg = OtCfmConfig {
            sigma_min: 1e-9,
            n_euler_steps: 10,
        };
        let x1 = Tensor::scalar(1.0);
        let mu = Tensor::scalar(1.0);
        let x0 = Tensor::scalar(0.0);

        // a field that always answers u_t exactly
        let sigma = cfg.sigma_min;
        let x1c = x1.clone();
        let x0c = x0.clone();
        let perfect = FnField(move |_x: &Tensor<f64>, _mu: &Tensor<f64>, _t: f64| {
            let mut u = x1c.clone();
            u.add_assign_scaled(&x0c, -(1.0 - sigma));
            u
        });
        let l = cfm_loss_mc(&perfect, &mu, &x1, &[(0.3, x0.clone()), (0.9, x0.clone())], &cfg)
            .unwrap();
        assert!(l.abs() < 1e-18);

        // zero field, x0 = 0, x1 = 1, fixed t: loss = ‖0 − 1‖² = 1
        let zero = FnField(|_: &Tensor<f64>, _: &Tensor<f64>, _t: f64| Tensor::scalar(0.0));
        let l = cfm_loss_mc(&zero, &mu, &x1, &[(0.5, x0.clone())], &cfg).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn loss_is_permutation_invariant_over_draws() {
        let cfg = OtCfmConfig::default();
        let mut rng = crate::rng::seeded(8);
        let x1: Tensor<f64> = normal_tensor(&mut rng, 2, 2);
        let mu: Tensor<f64> = normal_tensor(&mut rng, 2, 2);
        let field = FnField(|x: &Tensor<f64>, _: &Tensor<f64>, t: f64| x.map(|v| v * t));
        let d1 = (0.25, normal_tensor::<f64>(&mut rng, 2, 2));
        let d2 = (0.75, normal_tensor::<f64>(&mut rng, 2, 2));
        let a = cfm_loss_mc(&field, &mu, &x1, &[d1.clone(), d2.clone()], &cfg).unwrap();
        let b = cfm_loss_mc(&field, &mu, &x1, &[d2, d1], &cfg).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    fn tiny_flow(seed: u64) -> (ParamSet<f64>, FlowModel) {
        let mut ps = ParamSet::new();
        let mut rng = crate::rng::seeded(seed);
        let cfg = FlowConfig {
            n_mels: 6,
            content_dim: 10,
            global_dim: 4,
            local_dim: 3,
            speaker_dim: 2,
            fusion_hidden: 8,
            decoder: DecoderConfig {
                base_channels: 4,
                mid_channels: 6,
                time_dim: 8,
                activation: Activation::Gelu,
            },
        };
        let model = FlowModel::new(&mut ps, &mut rng, cfg, 3);
        (ps, model)
    }

    #[test]
    fn build_mu_upsamples_by_durations() {
        let (ps, model) = tiny_flow(1);
        let mut tape: Tape<f64> = Tape::inference();
        let vars = bind_params(&mut tape, &ps);
        let h_c = tape.constant(crate::rng::uniform_tensor(
            &mut crate::rng::seeded(2),
            2,
            10,
            -1.0,
            1.0,
        ));
        let spk = model.speaker_embedding_t(&mut tape, &vars, 0);
        let (mu, clamped) = model
            .build_mu_t(&mut tape, &vars, h_c, None, None, spk, &[2, 3])
            .unwrap();
        assert_eq!(tape.value(mu).shape(), (5, 6));
        assert_eq!(clamped, vec![2, 3]);
        // repeated rows of the same position are identical
        let m = tape.value(mu);
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(m.row(2), m.row(3));
        assert_eq!(m.row(3), m.row(4));
        assert_ne!(m.row(1), m.row(2));
    }

    #[test]
    fn build_mu_clamps_zero_durations() {
        let (ps, model) = tiny_flow(3);
        let mut tape: Tape<f64> = Tape::inference();
        let vars = bind_params(&mut tape, &ps);
        let h_c = tape.constant(Tensor::filled(2, 10, 0.2));
        let spk = model.speaker_embedding_t(&mut tape, &vars, 1);
        let (mu, clamped) = model
            .build_mu_t(&mut tape, &vars, h_c, None, None, spk, &[0, 2])
            .unwrap();
        assert_eq!(clamped, vec![1, 2]);
        assert_eq!(tape.value(mu).rows(), 3);
    }

    #[test]
    fn conditioning_is_live() {
        let (ps, model) = tiny_flow(5);
        let mut rng = crate::rng::seeded(17);
        let h_c_val: Tensor<f64> = crate::rng::uniform_tensor(&mut rng, 3, 10, -1.0, 1.0);
        let ag_val: Tensor<f64> = crate::rng::uniform_tensor(&mut rng, 1, 4, -1.0, 1.0);
        let al_val: Tensor<f64> = crate::rng::uniform_tensor(&mut rng, 3, 3, -1.0, 1.0);

        let run = |with_style: bool| {
            let mut tape: Tape<f64> = Tape::inference();
            let vars = bind_params(&mut tape, &ps);
            let h_c = tape.constant(h_c_val.clone());
            let spk = model.speaker_embedding_t(&mut tape, &vars, 0);
            let (a_g, a_l) = if with_style {
                (
                    Some(tape.constant(ag_val.clone())),
                    Some(tape.constant(al_val.clone())),
                )
            } else {
                (None, None)
            };
            let (mu, _) = model
                .build_mu_t(&mut tape, &vars, h_c, a_g, a_l, spk, &[1, 1, 2])
                .unwrap();
            tape.value(mu).clone()
        };
        assert_ne!(run(true), run(false), "zeroing A_g and A_l must change μ");
    }

    #[test]
    fn decoder_output_matches_input_grid_on_awkward_lengths() {
        let (ps, model) = tiny_flow(7);
        for t in [1usize, 2, 3, 5, 9] {
            let mut tape: Tape<f64> = Tape::inference();
            let vars = bind_params(&mut tape, &ps);
            let x = tape.constant(Tensor::filled(t, 6, 0.1));
            let mu = tape.constant(Tensor::filled(t, 6, -0.2));
            let v = model.field_t(&mut tape, &vars, x, mu, 0.4);
            assert_eq!(tape.value(v).shape(), (t, 6));
        }
    }
}
