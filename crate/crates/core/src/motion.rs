//! Constant-Nth-derivative interpolation between sparse control points.
//!
//! Every routine works on one coordinate at a time; callers apply them to
//! `x` and `y` independently. Time is measured in steps, so velocities are
//! metres per step, accelerations metres per step², and so on.
//!
//! Over a segment of `T` steps starting at `s0` with initial derivatives
//! `d_1 .. d_{N-1}` (velocity, acceleration, jerk), holding the `N`th
//! derivative `c` constant gives
//!
//! ```text
//! s(t) = s0 + Σ_{k=1}^{N-1} d_k t^k / k!  +  c t^N / N!
//! ```
//!
//! and requiring `s(T) = sT` fixes `c`. Chained segments inherit the
//! terminal derivatives of the previous polynomial, so a chain of order `N`
//! is `C^(N-1)` continuous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of the derivative held constant: 1 velocity, 2 acceleration,
/// 3 jerk, 4 snap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct MotionOrder(u8);

impl MotionOrder {
    pub const VELOCITY: MotionOrder = MotionOrder(1);
    pub const ACCELERATION: MotionOrder = MotionOrder(2);
    pub const JERK: MotionOrder = MotionOrder(3);
    pub const SNAP: MotionOrder = MotionOrder(4);

    pub fn new(n: u8) -> Result<Self> {
        if (1..=4).contains(&n) {
            Ok(Self(n))
        } else {
            Err(Error::InvalidOrder(n))
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Number of initial derivatives a segment of this order needs.
    pub fn required_derivatives(self) -> usize {
        self.get() - 1
    }
}

impl Default for MotionOrder {
    fn default() -> Self {
        Self::ACCELERATION
    }
}

impl TryFrom<u8> for MotionOrder {
    type Error = Error;
    fn try_from(n: u8) -> Result<Self> {
        Self::new(n)
    }
}

impl From<MotionOrder> for u8 {
    fn from(o: MotionOrder) -> u8 {
        o.0
    }
}

impl std::fmt::Display for MotionOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One interpolation span from `start` to `target` over `duration` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpSegment {
    pub start: f64,
    pub target: f64,
    /// Initial velocity, acceleration, jerk... (only the first `order - 1`
    /// entries are used).
    pub initial: Vec<f64>,
    pub duration: usize,
    pub order: MotionOrder,
}

impl InterpSegment {
    fn validate(&self) -> Result<()> {
        if self.duration == 0 {
            return Err(Error::InvalidSegment("duration must be at least one step".into()));
        }
        let need = self.order.required_derivatives();
        if self.initial.len() < need {
            return Err(Error::InvalidSegment(format!(
                "order {} needs {} initial derivative(s), got {}",
                self.order,
                need,
                self.initial.len()
            )));
        }
        Ok(())
    }

    /// Terminal derivatives `d_1 .. d_{N-1}` at `t = duration`.
    pub fn terminal_derivatives(&self) -> Result<Vec<f64>> {
        let c = solve_constant_term(self)?;
        let n = self.order.get();
        let coeffs = self.derivative_chain(c);
        let t = self.duration as f64;
        Ok((1..n).map(|k| (k..=n).map(|m| coeffs[m] * t.powi((m - k) as i32) / factorial(m - k)).sum()).collect())
    }

    /// `[_, d_1, .., d_{N-1}, c]` indexed by derivative order.
    fn derivative_chain(&self, c: f64) -> Vec<f64> {
        let n = self.order.get();
        let mut coeffs = vec![0.0; n + 1];
        coeffs[1..n].copy_from_slice(&self.initial[..n - 1]);
        coeffs[n] = c;
        coeffs
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// The constant `N`th derivative that carries the segment onto its target.
pub fn solve_constant_term(seg: &InterpSegment) -> Result<f64> {
    seg.validate()?;
    let n = seg.order.get();
    let t = seg.duration as f64;
    let mut rest = seg.target - seg.start;
    for k in 1..n {
        rest -= seg.initial[k - 1] * t.powi(k as i32) / factorial(k);
    }
    Ok(factorial(n) * rest / t.powi(n as i32))
}

/// Positions at `t = 1 ..= duration`. The final entry is `target`.
pub fn interpolate_segment(seg: &InterpSegment) -> Result<Vec<f64>> {
    let c = solve_constant_term(seg)?;
    let n = seg.order.get();
    let coeffs = seg.derivative_chain(c);
    let mut out: Vec<f64> = (1..=seg.duration)
        .map(|step| {
            let t = step as f64;
            seg.start + (1..=n).map(|k| coeffs[k] * t.powi(k as i32) / factorial(k)).sum::<f64>()
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = seg.target;
    }
    Ok(out)
}

/// Last observed position plus its trailing derivatives (per step).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Anchor {
    pub position: f64,
    pub derivatives: Vec<f64>,
}

impl Anchor {
    pub fn at_rest(position: f64) -> Self {
        Self { position, derivatives: vec![0.0; 3] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Control {
    /// Steps after the anchor.
    pub offset: usize,
    pub position: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseTrack {
    pub anchor: Anchor,
    pub controls: Vec<Control>,
    pub stride: usize,
}

impl SparseTrack {
    pub fn horizon(&self) -> usize {
        self.controls.last().map_or(0, |c| c.offset)
    }

    fn validate(&self) -> Result<()> {
        if self.controls.is_empty() {
            return Err(Error::InvalidTrack("no control points".into()));
        }
        let mut prev = 0;
        for c in &self.controls {
            if c.offset <= prev {
                return Err(Error::InvalidTrack(format!(
                    "control offsets must be strictly increasing from 1 (got {} after {})",
                    c.offset, prev
                )));
            }
            prev = c.offset;
        }
        Ok(())
    }
}

/// Control offsets `stride, 2·stride, ...` with the last one clamped onto
/// `horizon`.
pub fn control_offsets(horizon: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let count = horizon.div_ceil(stride);
    (1..=count).map(|k| (k * stride).min(horizon)).collect()
}

pub fn control_count(horizon: usize, stride: usize) -> usize {
    horizon.div_ceil(stride.max(1))
}

/// Dense positions for every step up to the last control, chaining one
/// segment per control.
pub fn densify(track: &SparseTrack, order: MotionOrder) -> Result<Vec<f64>> {
    track.validate()?;
    let need = order.required_derivatives();
    if track.anchor.derivatives.len() < need {
        return Err(Error::InvalidTrack(format!(
            "anchor has {} derivative(s), order {} needs {}",
            track.anchor.derivatives.len(),
            order,
            need
        )));
    }
    let mut out = Vec::with_capacity(track.horizon());
    let mut start = track.anchor.position;
    let mut initial = track.anchor.derivatives[..need].to_vec();
    let mut prev_offset = 0;
    for c in &track.controls {
        let seg = InterpSegment { start, target: c.position, initial, duration: c.offset - prev_offset, order };
        out.extend(interpolate_segment(&seg)?);
        initial = seg.terminal_derivatives()?;
        start = c.position;
        prev_offset = c.offset;
    }
    Ok(out)
}

/// Backward finite differences of the trailing history (oldest first):
/// `v0 = s0 - s-1`, `a0 = s0 - 2 s-1 + s-2`, `j0 = s0 - 3 s-1 + 3 s-2 - s-3`.
/// Returns the `order - 1` derivatives the given order needs.
pub fn estimate_anchor_derivatives(history: &[f64], order: MotionOrder) -> Result<Anchor> {
    let need = order.required_derivatives();
    if history.len() < order.get() {
        return Err(Error::InsufficientHistory { have: history.len(), need: order.get() });
    }
    let last = history.len() - 1;
    let derivatives = (1..=need)
        .map(|k| {
            let mut binom = 1.0;
            let mut acc = 0.0;
            for i in 0..=k {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * binom * history[last - i];
                binom = binom * (k - i) as f64 / (i + 1) as f64;
            }
            acc
        })
        .collect();
    Ok(Anchor { position: history[last], derivatives })
}

/// Keeps every `stride`-th dense output counting from the first future
/// step, always retaining the final one.
pub fn sparsify_dense(dense: &[f64], stride: usize, anchor: Anchor) -> Result<SparseTrack> {
    if stride == 0 {
        return Err(Error::InvalidTrack("stride must be at least 1".into()));
    }
    let controls = control_offsets(dense.len(), stride)
        .into_iter()
        .map(|offset| Control { offset, position: dense[offset - 1] })
        .collect();
    Ok(SparseTrack { anchor, controls, stride })
}

/// Densification as an explicit affine map.
///
/// For fixed control offsets and order, the dense output is linear in the
/// control positions and in the anchor state:
/// `dense = controls · control_basis + [s0, d_1..] · anchor_basis`.
/// Both bases are obtained by densifying unit inputs, so this is the same
/// function as [`densify`].
#[derive(Clone, Debug)]
pub struct DensifyOperator {
    pub horizon: usize,
    pub offsets: Vec<usize>,
    pub order: MotionOrder,
    /// `K x horizon`, row-major.
    pub control_basis: Vec<f64>,
    /// `order x horizon`, rows for position then each derivative.
    pub anchor_basis: Vec<f64>,
}

impl DensifyOperator {
    pub fn new(horizon: usize, stride: usize, order: MotionOrder) -> Result<Self> {
        if horizon == 0 || stride == 0 {
            return Err(Error::InvalidTrack("horizon and stride must be positive".into()));
        }
        let offsets = control_offsets(horizon, stride);
        let need = order.required_derivatives();
        let k = offsets.len();
        let run = |anchor: Anchor, controls: Vec<f64>| {
            let track = SparseTrack {
                anchor,
                controls: offsets
                    .iter()
                    .zip(controls)
                    .map(|(&offset, position)| Control { offset, position })
                    .collect(),
                stride,
            };
            densify(&track, order)
        };
        let mut control_basis = Vec::with_capacity(k * horizon);
        for i in 0..k {
            let mut unit = vec![0.0; k];
            unit[i] = 1.0;
            control_basis.extend(run(Anchor { position: 0.0, derivatives: vec![0.0; need] }, unit)?);
        }
        let mut anchor_basis = Vec::with_capacity((need + 1) * horizon);
        for i in 0..=need {
            let mut derivatives = vec![0.0; need];
            let position = if i == 0 { 1.0 } else { 0.0 };
            if i > 0 {
                derivatives[i - 1] = 1.0;
            }
            anchor_basis.extend(run(Anchor { position, derivatives }, vec![0.0; k])?);
        }
        Ok(Self { horizon, offsets, order, control_basis, anchor_basis })
    }

    pub fn control_count(&self) -> usize {
        self.offsets.len()
    }

    /// Dense contribution of an anchor alone.
    pub fn anchor_response(&self, anchor: &Anchor) -> Vec<f64> {
        let need = self.order.required_derivatives();
        let mut out = vec![0.0; self.horizon];
        let coeffs = std::iter::once(anchor.position).chain(anchor.derivatives.iter().copied().take(need));
        for (row, c) in self.anchor_basis.chunks_exact(self.horizon).zip(coeffs) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        out
    }

    pub fn apply(&self, anchor: &Anchor, controls: &[f64]) -> Vec<f64> {
        let mut out = self.anchor_response(anchor);
        for (row, c) in self.control_basis.chunks_exact(self.horizon).zip(controls) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        out
    }
}
