//! Product integration of `e^{-q s} f(s)` with `f` piecewise linear between
//! grid nodes. The exponential factor is integrated exactly, so one step
//! conserves probability: `q * (left + right) + e^{-q dt} = 1`.

/// `(int_0^tau e^{-qs} ds, int_0^tau s e^{-qs} ds)`.
fn moments(q: f64, tau: f64) -> (f64, f64) {
    let x = q * tau;
    let m0 = -(-x).exp_m1() / q;
    // 1 - e^{-x}(1 + x), expanded near zero
    let core = if x < 1e-3 {
        x * x * (0.5 - x * (1.0 / 3.0 - x * (0.125 - x * (1.0 / 30.0 - x / 144.0))))
    } else {
        -(-x).exp_m1() - x * (-x).exp()
    };
    (m0, core / (q * q))
}

/// Weights for one grid step of length `dt` at decay rate `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWeights {
    pub left: f64,
    pub right: f64,
    /// `e^{-q dt}`
    pub decay: f64,
}

impl StepWeights {
    pub fn new(q: f64, dt: f64) -> Self {
        let (m0, m1) = moments(q, dt);
        let right = m1 / dt;
        Self {
            left: m0 - right,
            right,
            decay: (-q * dt).exp(),
        }
    }

    /// `int_0^dt e^{-qs} f(s) ds` for `f` linear from `f0` to `f1`.
    #[inline]
    pub fn integrate(&self, f0: f64, f1: f64) -> f64 {
        self.left * f0 + self.right * f1
    }
}

/// `int_0^tau e^{-qs} f(s) ds` for `0 <= tau <= dt`, where `f` is linear on
/// `[0, dt]` from `f0` to `f1`.
pub fn partial_step(q: f64, dt: f64, tau: f64, f0: f64, f1: f64) -> f64 {
    if tau <= 0.0 {
        return 0.0;
    }
    let (m0, m1) = moments(q, tau);
    let right = m1 / dt;
    let left = m0 - right;
    if right == 0.0 {
        left * f0
    } else {
        left * f0 + right * f1
    }
}
