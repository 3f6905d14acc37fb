use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Added to the structure-map norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Mean absolute error between the network output and the target.
pub fn l1_loss(tape: &mut Tape, sr: Var, hr: Var) -> Result<Var> {
    let (a, b) = (tape.value(sr).shape(), tape.value(hr).shape());
    if a != b {
        return Err(Error::dim("l1_loss", format!("output {a:?} vs target {b:?}")));
    }
    let d = tape.sub(sr, hr)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `Σ_c F_c²` per image, divided by its Frobenius norm (+ [`NORM_EPS`]).
pub fn structure_map(tape: &mut Tape, feat: Var) -> Result<Var> {
    let e = tape.channel_energy(feat)?;
    let n = tape.sample_l2_norm(e);
    let n = tape.add_scalar(n, NORM_EPS);
    tape.sample_div(e, n)
}

/// Mean over the batch of the L2 distance between normalised structure
/// maps. The teacher side is detached.
pub fn skt_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let (sn, _, sh, sw) = tape.value(student).dims4()?;
    let (tn, _, th, tw) = tape.value(teacher).dims4()?;
    if (sn, sh, sw) != (tn, th, tw) {
        return Err(Error::dim("skt_loss", format!("student {:?} vs teacher {:?} on axes 0,2,3", tape.value(student).shape(), tape.value(teacher).shape())));
    }
    let t = tape.detach(teacher);
    let fs = structure_map(tape, student)?;
    let ft = structure_map(tape, t)?;
    let d = tape.sub(fs, ft)?;
    let dist = tape.sample_l2_norm(d);
    Ok(tape.mean(dist))
}

/// Warmup runs through epoch `k` (epochs count from 1).
pub fn warmup_active(epoch: usize, k: usize) -> bool {
    epoch <= k
}

/// `L1 + λ·L_SKT`, plus the gate warmup term while warmup is active.
pub fn total_loss(tape: &mut Tape, l1: Var, skt: Var, warmup: Option<Var>, epoch: usize, k: usize, lambda: f64) -> Result<Var> {
    let s = tape.mul_scalar(skt, lambda);
    let mut total = tape.add(l1, s)?;
    if let (Some(w), true) = (warmup, warmup_active(epoch, k)) {
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l1: f64, skt: f64, warmup: f64, epoch: usize, k: usize, lambda: f64) -> f64 {
    l1 + lambda * skt + if warmup_active(epoch, k) { warmup } else { 0.0 }
}

/// `lr0 · 0.5^floor(epoch / halve_every)`.
pub fn lr_at(lr0: f64, epoch: usize, halve_every: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}
