//! Discrete noise schedule and the closed-form one-step noising/recovery algebra.

use osr_autodiff::{Scalar, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_LAMBDA_MAX: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    lambda_max: f64,
    betas: Option<(f64, f64)>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END, DEFAULT_LAMBDA_MAX)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// `β` spaced linearly in square-root space between the endpoints;
    /// `ᾱ_t = ∏_{s≤t} (1 - β_s)`.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64, lambda_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("invalid beta range {beta_start}..{beta_end}")));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let beta = (s0 + frac * (s1 - s0)).powi(2);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let mut s = Self::from_alpha_bar(alpha_bar, lambda_max)?;
        s.betas = Some((beta_start, beta_end));
        Ok(s)
    }

    /// Builds a schedule from explicit `ᾱ` values, index 0 included.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, lambda_max: f64) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar must start at exactly 1 and have T >= 1".into()));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alpha_bar values must lie in (0, 1]".into()));
        }
        if alpha_bar[1..].windows(2).any(|w| w[1] >= w[0]) || alpha_bar[1] >= 1.0 {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(Error::Config(format!("lambda_max must be positive, got {lambda_max}")));
        }
        Ok(Self {
            alpha_bar,
            lambda_max,
            betas: None,
        })
    }

    /// `T`, the largest valid timestep.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::Range {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    /// `w_t = √(1-ᾱ_t) / √ᾱ_t`.
    pub fn noise_coeff(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok((1.0 - a).sqrt() / a.sqrt())
    }

    /// `λ_t = min(1 / w_t, λ_max)`; undefined at `t = 0`.
    pub fn mod_coeff(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::Domain("modulation coefficient diverges at t = 0".into()));
        }
        self.check(t, 1)?;
        Ok((1.0 / self.noise_coeff(t)?).min(self.lambda_max))
    }

    /// `(√ᾱ_t, √(1-ᾱ_t))`.
    pub fn signal_noise(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    /// Key-value text form for checkpoints. Schedules built from explicit `ᾱ` tables are
    /// written as the table itself.
    pub fn to_text(&self) -> String {
        match self.betas {
            Some((b0, b1)) => format!(
                "kind=scaled_linear\nsteps={}\nbeta_start={b0:e}\nbeta_end={b1:e}\nlambda_max={:e}\n",
                self.steps(),
                self.lambda_max
            ),
            None => {
                let table: Vec<String> = self.alpha_bar.iter().map(|a| format!("{a:e}")).collect();
                format!(
                    "kind=table\nlambda_max={:e}\nalpha_bar={}\n",
                    self.lambda_max,
                    table.join(",")
                )
            }
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("schedule line `{line}` lacks `=`")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Format(format!("schedule lacks `{k}`")));
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("schedule `{k}` is not a number")))
        };
        match get("kind")? {
            "scaled_linear" => {
                let steps = get("steps")?
                    .parse()
                    .map_err(|_| Error::Format("schedule `steps` is not an integer".into()))?;
                Self::scaled_linear(steps, num("beta_start")?, num("beta_end")?, num("lambda_max")?)
            }
            "table" => {
                let table = get("alpha_bar")?
                    .split(',')
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Format("bad alpha_bar table".into()))?;
                Self::from_alpha_bar(table, num("lambda_max")?)
            }
            other => Err(Error::Format(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TimestepRange {
    pub t_min: usize,
    pub t_max: usize,
}

impl TimestepRange {
    pub const TRAIN_DEFAULT: Self = Self { t_min: 20, t_max: 400 };

    pub fn new(t_min: usize, t_max: usize, schedule: &NoiseSchedule) -> Result<Self> {
        let r = Self { t_min, t_max };
        r.validate(schedule)?;
        Ok(r)
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(1 <= self.t_min && self.t_min <= self.t_max && self.t_max <= schedule.steps()) {
            return Err(Error::Config(format!(
                "timestep range [{}, {}] not within [1, {}]",
                self.t_min,
                self.t_max,
                schedule.steps()
            )));
        }
        Ok(())
    }

    /// Uniform integer in `[t_min, t_max]`.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.t_min..=self.t_max)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = √ᾱ_t · z_L + √(1-ᾱ_t) · ε_a`.
pub fn forward_diffuse<T: Scalar>(
    z_l: &Tensor<T>,
    eps_a: &Tensor<T>,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Tensor<T>> {
    same_shape(z_l, eps_a, "forward_diffuse")?;
    let (a, b) = schedule.signal_noise(t)?;
    let (a, b) = (T::from_f64(a), T::from_f64(b));
    let data = z_l.data().iter().zip(eps_a.data()).map(|(&z, &e)| a * z + b * e).collect();
    Ok(Tensor::from_vec(z_l.shape(), data).expect("same shape"))
}

/// `ẑ_H = (z_t - √(1-ᾱ_t) · ε_pred) / √ᾱ_t`.
pub fn reverse_recover<T: Scalar>(
    z_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Tensor<T>> {
    same_shape(z_t, eps_pred, "reverse_recover")?;
    if t == 0 {
        schedule.alpha_bar(t)?;
        return Ok(z_t.clone());
    }
    let (a, b) = schedule.signal_noise(t)?;
    let (inv_a, b) = (T::from_f64(1.0 / a), T::from_f64(b));
    let data = z_t.data().iter().zip(eps_pred.data()).map(|(&z, &e)| (z - b * e) * inv_a).collect();
    Ok(Tensor::from_vec(z_t.shape(), data).expect("same shape"))
}

/// The residual form of recovery, `ẑ_H = z_L + w_t (ε_a - ε_pred)`, valid when `z_t` came from
/// [`forward_diffuse`] with the same `z_L` and `ε_a`.
pub fn recover_residual<T: Scalar>(
    z_l: &Tensor<T>,
    eps_a: &Tensor<T>,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Tensor<T>> {
    same_shape(z_l, eps_a, "recover_residual")?;
    same_shape(z_l, eps_pred, "recover_residual")?;
    let w = T::from_f64(schedule.noise_coeff(t)?);
    let data = z_l
        .data()
        .iter()
        .zip(eps_a.data())
        .zip(eps_pred.data())
        .map(|((&z, &ea), &ep)| z + w * (ea - ep))
        .collect();
    Ok(Tensor::from_vec(z_l.shape(), data).expect("same shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(vec![1.0, 0.999999, 0.8, 0.5], 100.0).unwrap()
    }

    #[test]
    fn coefficient_examples() {
        let s = toy();
        assert_eq!(s.noise_coeff(0).unwrap(), 0.0);
        assert!((s.noise_coeff(3).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.noise_coeff(2).unwrap() - 0.5).abs() < 1e-12);
        assert!((s.mod_coeff(3).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.mod_coeff(2).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(s.mod_coeff(1).unwrap(), 100.0);
        assert!(matches!(s.mod_coeff(0), Err(Error::Domain(_))));
        assert!(matches!(s.noise_coeff(4), Err(Error::Range { .. })));
    }

    #[test]
    fn diffuse_and_recover_examples() {
        let s = toy();
        let ones = Tensor::<f64>::full(&[2, 2], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2, 2]);
        let zt = forward_diffuse(&ones, &ones, &s, 3).unwrap();
        assert!(zt.data().iter().all(|&v| (v - 1.41421356).abs() < 1e-8));
        assert_eq!(forward_diffuse(&ones, &zeros, &s, 0).unwrap(), ones);
        let r = reverse_recover(&zeros, &ones, &s, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v + 1.0).abs() < 1e-12));
        assert_eq!(reverse_recover(&ones, &zeros, &s, 0).unwrap(), ones);
        assert!(forward_diffuse(&ones, &Tensor::zeros(&[4]), &s, 1).is_err());
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        let ab100 = s.alpha_bar(100).unwrap();
        assert!(ab100 > 0.85 && ab100 < 0.95, "{ab100}");
    }

    #[test]
    fn text_round_trip() {
        for s in [NoiseSchedule::default(), toy()] {
            assert_eq!(NoiseSchedule::from_text(&s.to_text()).unwrap(), s);
        }
    }

    #[test]
    fn timestep_sampling() {
        let s = NoiseSchedule::default();
        let single = TimestepRange::new(100, 100, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..50).all(|_| single.sample(&mut rng) == 100));
        assert!(TimestepRange::new(0, 10, &s).is_err());
        assert!(TimestepRange::new(10, 1001, &s).is_err());
    }
}
