use serde::{Deserialize, Serialize};

/// Monotonicity of a uniform scale mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `1/theta` on `(0, theta)`.
    Nonincreasing,
    /// `1/theta` on `(1 - theta, 1)`.
    Nondecreasing,
}

fn reflect(t: f64, direction: Direction) -> f64 {
    match direction {
        Direction::Nonincreasing => t,
        Direction::Nondecreasing => 1.0 - t,
    }
}

pub fn uniform_scale_pdf(t: f64, theta: f64, direction: Direction) -> f64 {
    let s = reflect(t, direction);
    if s >= 0.0 && s < theta {
        1.0 / theta
    } else {
        0.0
    }
}

pub fn ln_uniform_scale_pdf(t: f64, theta: f64, direction: Direction) -> f64 {
    let s = reflect(t, direction);
    if s >= 0.0 && s < theta {
        -theta.ln()
    } else {
        f64::NEG_INFINITY
    }
}

pub fn uniform_scale_cdf(t: f64, theta: f64, direction: Direction) -> f64 {
    let below = (t.clamp(0.0, 1.0) / theta).min(1.0);
    match direction {
        Direction::Nonincreasing => below,
        Direction::Nondecreasing => ((t.clamp(0.0, 1.0) - (1.0 - theta)) / theta).clamp(0.0, 1.0),
    }
}
