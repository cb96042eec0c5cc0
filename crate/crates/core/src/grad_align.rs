//! Gradient alignment: replace an auxiliary gradient by its projection on
//! the main-loss gradient before combining the two.

use alora_autodiff::{Float, GradientMap, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AloraError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaMode {
    /// Always blend in the projection, even when it opposes `g_main`.
    Soft,
    /// Blend only when the angle is at most 90°.
    Hard,
    Off,
}

impl GaMode {
    pub fn name(self) -> &'static str {
        match self {
            GaMode::Soft => "soft",
            GaMode::Hard => "hard",
            GaMode::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft" => Some(GaMode::Soft),
            "hard" => Some(GaMode::Hard),
            "off" => Some(GaMode::Off),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub alpha: f64,
    pub mode: GaMode,
    pub epsilon_norm: f64,
    /// One angle per parameter tensor instead of one global angle.
    pub per_tensor: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            mode: GaMode::Hard,
            epsilon_norm: 1e-12,
            per_tensor: false,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(AloraError::config("grad_align.alpha", "must lie in [0, 1]"));
        }
        if !(self.epsilon_norm >= 0.0 && self.epsilon_norm.is_finite()) {
            return Err(AloraError::config("grad_align.epsilon_norm", "must be a finite non-negative number"));
        }
        Ok(())
    }
}

fn dot<S: Float>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

fn norm<S: Float>(a: &[S]) -> f64 {
    dot(a, a).sqrt()
}

/// `(cos θ, θ in degrees)` between two gradients, or `None` when either norm
/// is at most `eps`.
pub fn grad_angle<S: Float>(g_main: &[S], g_aux: &[S], eps: f64) -> Option<(f64, f64)> {
    assert_eq!(g_main.len(), g_aux.len(), "gradient lengths differ");
    let (nm, na) = (norm(g_main), norm(g_aux));
    if nm <= eps || na <= eps {
        return None;
    }
    let cos = (dot(g_aux, g_main) / (na * nm)).clamp(-1.0, 1.0);
    Some((cos, cos.acos().to_degrees()))
}

/// Signed vector projection of `g_aux` onto `g_main`, or `None` when
/// `‖g_main‖ ≤ eps`.
pub fn project<S: Float>(g_aux: &[S], g_main: &[S], eps: f64) -> Option<Vec<S>> {
    let c = projection_coefficient(g_aux, g_main, eps)?;
    Some(g_main.iter().map(|&x| S::lit(c * x.as_f64())).collect())
}

/// `(g_aux·g_main) / (g_main·g_main)`.
fn projection_coefficient<S: Float>(g_aux: &[S], g_main: &[S], eps: f64) -> Option<f64> {
    let mm = dot(g_main, g_main);
    if mm.sqrt() <= eps {
        return None;
    }
    Some(dot(g_aux, g_main) / mm)
}

/// Result of one combination.
#[derive(Debug, Clone, PartialEq)]
pub struct GaOutcome<S> {
    pub grad: Vec<S>,
    /// `g_GA = coefficient · g_main`.
    pub coefficient: f64,
    /// `None` for mode off or a degenerate gradient.
    pub degrees: Option<f64>,
}

/// Combines a main and an auxiliary gradient.
///
/// Soft returns `(1−α)·g_main + α·g_P`; hard does the same when the angle is
/// at most 90° and returns `g_main` otherwise. Mode off and near-zero norms
/// return `g_main` unchanged.
pub fn combine<S: Float>(g_main: &[S], g_aux: &[S], config: &GaConfig) -> GaOutcome<S> {
    let unchanged = |degrees| GaOutcome {
        grad: g_main.to_vec(),
        coefficient: 1.0,
        degrees,
    };
    if config.mode == GaMode::Off {
        return unchanged(None);
    }
    let eps = config.epsilon_norm;
    let Some((cos, degrees)) = grad_angle(g_main, g_aux, eps) else {
        return unchanged(None);
    };
    if config.mode == GaMode::Hard && cos < 0.0 {
        return unchanged(Some(degrees));
    }
    let p = projection_coefficient(g_aux, g_main, eps).expect("norm checked above");
    let coefficient = (1.0 - config.alpha) + config.alpha * p;
    GaOutcome {
        grad: g_main
            .iter()
            .map(|&x| S::lit(coefficient * x.as_f64()))
            .collect(),
        coefficient,
        degrees: Some(degrees),
    }
}

/// Per-step record of a map-level combination.
#[derive(Debug, Clone, PartialEq)]
pub struct GaStep {
    pub degrees: Option<f64>,
    pub coefficient: f64,
}

/// [`combine`] over gradient maps, flattening the union of their keys.
///
/// With `per_tensor` each key is combined on its own and the reported angle
/// and coefficient are those of the concatenated result against `g_main`.
pub fn combine_maps<S: Float>(
    main: &GradientMap<S>,
    aux: &GradientMap<S>,
    config: &GaConfig,
) -> Result<(GradientMap<S>, GaStep)> {
    let mut layout = main.clone();
    for (id, g) in aux.iter() {
        if !layout.contains(id) {
            layout.insert(id, Tensor::zeros(g.shape().to_vec()));
        }
    }
    let flat_main = main.flatten_like(&layout);
    let flat_aux = aux.flatten_like(&layout);
    if !config.per_tensor {
        let out = combine(&flat_main, &flat_aux, config);
        let step = GaStep {
            degrees: out.degrees,
            coefficient: out.coefficient,
        };
        return Ok((layout.unflatten(&out.grad)?, step));
    }
    let mut combined = GradientMap::new();
    let mut offset = 0;
    for (id, g) in layout.iter() {
        let n = g.numel();
        let out = combine(
            &flat_main[offset..offset + n],
            &flat_aux[offset..offset + n],
            config,
        );
        combined.insert(id, Tensor::new(g.shape().to_vec(), out.grad)?);
        offset += n;
    }
    let flat = combined.flatten();
    let degrees = grad_angle(&flat_main, &flat_aux, config.epsilon_norm).map(|(_, d)| d);
    let coefficient = projection_coefficient(&flat, &flat_main, config.epsilon_norm).unwrap_or(1.0);
    Ok((combined, GaStep { degrees, coefficient }))
}
