//! One-hidden-layer classifier `f(x) = V σ(p(x))` trained with plain SGD and
//! hand-written backprop, used to watch how many hidden units go quiet.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyVariant {
    /// `a = relu(θx + b)`
    Relu,
    /// `a = swish(θx + b) ⊙ (τx + c)`
    Swiglu,
}

impl ToyVariant {
    pub fn name(self) -> &'static str {
        match self {
            ToyVariant::Relu => "relu",
            ToyVariant::Swiglu => "swiglu",
        }
    }
}

impl FromStr for ToyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ToyVariant::Relu),
            "swiglu" => Ok(ToyVariant::Swiglu),
            other => Err(Error::Config(format!("unknown toy variant `{other}`"))),
        }
    }
}

/// Post-activations below this are counted as inactive.
pub const NEAR_ZERO: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmergenceConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub classes: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Distance scale between class centres.
    pub separation: f64,
    /// Standard deviation of points around their centre.
    pub spread: f64,
    pub record_every: usize,
}

impl Default for EmergenceConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_hidden: 64,
            classes: 3,
            steps: 4000,
            lr: 0.1,
            seed: 1,
            batch_size: 32,
            n_train: 16384,
            n_eval: 256,
            // overlapping clusters keep the loss away from zero
            separation: 0.3,
            spread: 1.0,
            record_every: 100,
        }
    }
}

impl EmergenceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_in,
            self.d_hidden,
            self.batch_size,
            self.n_train,
            self.n_eval,
            self.record_every,
        ];
        if self.classes < 2 || positive.contains(&0) {
            return Err(Error::Config(
                "emergence sizes must be positive and classes >= 2".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Row-major parameters of the toy classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNetwork {
    pub variant: ToyVariant,
    pub d_in: usize,
    pub d_hidden: usize,
    pub classes: usize,
    /// `d_hidden × d_in`
    pub theta: Vec<f64>,
    pub bias: Vec<f64>,
    /// Linear branch of the gated variant; empty for ReLU.
    pub tau: Vec<f64>,
    pub tau_bias: Vec<f64>,
    /// `classes × d_hidden`, zero-mean at initialization.
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub theta: Vec<f64>,
    pub bias: Vec<f64>,
    pub tau: Vec<f64>,
    pub tau_bias: Vec<f64>,
    pub v: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .zip(b)
        .map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

struct Forward {
    p: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
    logits: Vec<f64>,
}

impl ToyNetwork {
    pub fn init(
        variant: ToyVariant,
        d_in: usize,
        d_hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let first = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let last = Normal::new(0.0, 1.0 / (d_hidden as f64).sqrt()).expect("valid std");
        let theta = (0..d_hidden * d_in).map(|_| first.sample(rng)).collect();
        let (tau, tau_bias) = match variant {
            ToyVariant::Relu => (Vec::new(), Vec::new()),
            ToyVariant::Swiglu => (
                (0..d_hidden * d_in).map(|_| first.sample(rng)).collect(),
                vec![0.0; d_hidden],
            ),
        };
        let v = (0..classes * d_hidden).map(|_| last.sample(rng)).collect();
        Self {
            variant,
            d_in,
            d_hidden,
            classes,
            theta,
            bias: vec![0.0; d_hidden],
            tau,
            tau_bias,
            v,
        }
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let p = affine(&self.theta, &self.bias, x);
        let (u, a): (Vec<f64>, Vec<f64>) = match self.variant {
            ToyVariant::Relu => (Vec::new(), p.iter().map(|&v| v.max(0.0)).collect()),
            ToyVariant::Swiglu => {
                let u = affine(&self.tau, &self.tau_bias, x);
                let a = p.iter().zip(&u).map(|(&g, &l)| swish(g) * l).collect();
                (u, a)
            }
        };
        let logits = affine(&self.v, &vec![0.0; self.classes], &a);
        Forward { p, u, a, logits }
    }

    /// Hidden post-activations for one input.
    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).a
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| -log_softmax(&self.forward(x).logits)[y])
            .sum::<f64>()
            / xs.len() as f64
    }

    /// Loss and analytic gradients of the mean cross-entropy.
    pub fn gradients(&self, xs: &[Vec<f64>], ys: &[usize]) -> (f64, Gradients) {
        let (h, d) = (self.d_hidden, self.d_in);
        let mut g = Gradients {
            theta: vec![0.0; h * d],
            bias: vec![0.0; h],
            tau: vec![0.0; self.tau.len()],
            tau_bias: vec![0.0; self.tau_bias.len()],
            v: vec![0.0; self.v.len()],
        };
        let scale = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let f = self.forward(x);
            let logp = log_softmax(&f.logits);
            loss -= logp[y];
            let dz: Vec<f64> = logp
                .iter()
                .enumerate()
                .map(|(k, lp)| (lp.exp() - f64::from(u8::from(k == y))) * scale)
                .collect();
            let mut da = vec![0.0; h];
            for (k, &dzk) in dz.iter().enumerate() {
                let row = &self.v[k * h..(k + 1) * h];
                for j in 0..h {
                    g.v[k * h + j] += dzk * f.a[j];
                    da[j] += dzk * row[j];
                }
            }
            for j in 0..h {
                let dp = match self.variant {
                    ToyVariant::Relu => {
                        if f.p[j] > 0.0 {
                            da[j]
                        } else {
                            0.0
                        }
                    }
                    ToyVariant::Swiglu => {
                        let du = da[j] * swish(f.p[j]);
                        g.tau_bias[j] += du;
                        for (gt, xi) in g.tau[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gt += du * xi;
                        }
                        da[j] * f.u[j] * swish_grad(f.p[j])
                    }
                };
                g.bias[j] += dp;
                for (gt, xi) in g.theta[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gt += dp * xi;
                }
            }
        }
        (loss * scale, g)
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.theta,
            &mut self.bias,
            &mut self.tau,
            &mut self.tau_bias,
            &mut self.v,
        ]
    }

    fn apply(&mut self, g: &Gradients, lr: f64) {
        let grads = [&g.theta, &g.bias, &g.tau, &g.tau_bias, &g.v];
        for (p, gp) in self.params_mut().into_iter().zip(grads) {
            p.iter_mut().zip(gp).for_each(|(w, d)| *w -= lr * d);
        }
    }
}

/// Largest elementwise relative gap between analytic and central-difference
/// gradients, `|a − n| / max(|a|, |n|, 1e-7)`.
pub fn gradient_check(net: &ToyNetwork, xs: &[Vec<f64>], ys: &[usize], step: f64) -> f64 {
    let (_, g) = net.gradients(xs, ys);
    let analytic = [g.theta, g.bias, g.tau, g.tau_bias, g.v];
    let mut probe = net.clone();
    let mut worst = 0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.params_mut()[which][i];
            probe.params_mut()[which][i] = orig + step;
            let up = probe.loss(xs, ys);
            probe.params_mut()[which][i] = orig - step;
            let down = probe.loss(xs, ys);
            probe.params_mut()[which][i] = orig;
            let n = (up - down) / (2.0 * step);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-7));
        }
    }
    worst
}

/// Inputs and labels, train then eval.
pub type ClusterData = (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>);

/// Gaussian class clusters; labels cycle through the classes.
pub fn cluster_data(cfg: &EmergenceConfig, rng: &mut impl Rng) -> ClusterData {
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let centres: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.d_in)
                .map(|_| cfg.separation * unit.sample(rng))
                .collect()
        })
        .collect();
    let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
        let ys: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        let xs = ys
            .iter()
            .map(|&y| {
                centres[y]
                    .iter()
                    .map(|c| c + cfg.spread * unit.sample(rng))
                    .collect()
            })
            .collect();
        (xs, ys)
    };
    let (xt, yt) = draw(cfg.n_train);
    let (xe, ye) = draw(cfg.n_eval);
    (xt, yt, xe, ye)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Mean of the positive gate pre-activations `p > 0`.
    pub mean_pos_magnitude: f64,
    /// Share of hidden post-activations with `|a| < NEAR_ZERO`.
    pub near_zero_fraction: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTrajectory {
    pub variant: ToyVariant,
    pub points: Vec<TrajectoryPoint>,
}

impl SparsityTrajectory {
    pub fn initial(&self) -> &TrajectoryPoint {
        &self.points[0]
    }

    pub fn last(&self) -> &TrajectoryPoint {
        self.points
            .last()
            .expect("trajectory always has the init point")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_pos_magnitude,near_zero_fraction\n");
        for p in &self.points {
            writeln!(
                out,
                "{},{:.9},{:.9}",
                p.step, p.mean_pos_magnitude, p.near_zero_fraction
            )
            .unwrap();
        }
        out
    }
}

fn measure(net: &ToyNetwork, xs: &[Vec<f64>], ys: &[usize], step: usize) -> TrajectoryPoint {
    let (mut pos_sum, mut pos_n, mut quiet) = (0.0, 0usize, 0usize);
    for x in xs {
        let f = net.forward(x);
        for &p in f.p.iter().filter(|&&p| p > 0.0) {
            pos_sum += p;
            pos_n += 1;
        }
        quiet += f.a.iter().filter(|a| a.abs() < NEAR_ZERO).count();
    }
    TrajectoryPoint {
        step,
        mean_pos_magnitude: if pos_n == 0 {
            0.0
        } else {
            pos_sum / pos_n as f64
        },
        near_zero_fraction: quiet as f64 / (xs.len() * net.d_hidden) as f64,
        eval_loss: net.loss(xs, ys),
    }
}

/// Trains the toy network and records sparsity statistics on held-out data
/// at step 0, every `record_every` steps, and at the final step.
///
/// Both variants see the same data for a given seed.
pub fn emergence_experiment(
    cfg: &EmergenceConfig,
    variant: ToyVariant,
) -> Result<SparsityTrajectory> {
    cfg.validate()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (xt, yt, xe, ye) = cluster_data(cfg, &mut data_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7e57);
    let mut net = ToyNetwork::init(variant, cfg.d_in, cfg.d_hidden, cfg.classes, &mut rng);

    let mut points = vec![measure(&net, &xe, &ye, 0)];
    let mut order: Vec<usize> = (0..cfg.n_train).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += cfg.batch_size;
        let bx: Vec<Vec<f64>> = idx.iter().map(|&i| xt[i].clone()).collect();
        let by: Vec<usize> = idx.iter().map(|&i| yt[i]).collect();
        let (loss, g) = net.gradients(&bx, &by);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        net.apply(&g, cfg.lr);
        if step % cfg.record_every == 0 || step == cfg.steps {
            let p = measure(&net, &xe, &ye, step);
            if !p.eval_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: p.eval_loss,
                });
            }
            points.push(p);
        }
    }
    Ok(SparsityTrajectory { variant, points })
}
