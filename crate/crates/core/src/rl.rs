//! PPO with partial-trajectory GAE, and behavioral cloning onto the policy
//! mode.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamOutcome, AdamState, Gradients};
use crate::policy::{PolicyParams, ACT_DIM, UNIT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Rl,
    To,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Rl => "rl",
            Source::To => "to",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action_unit: [f64; ACT_DIM],
    pub log_prob_old: f64,
    pub reward: f64,
    pub value_old: f64,
    pub done: bool,
    pub segment_id: u64,
    pub source: Source,
}

/// Observation paired with the TO action in unit-square coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlPair {
    pub obs: Observation,
    pub expert_action_unit: [f64; ACT_DIM],
}

impl SlPair {
    pub fn new(obs: Observation, expert_action_unit: [f64; ACT_DIM]) -> Self {
        Self { obs, expert_action_unit: expert_action_unit.map(|u| u.clamp(UNIT_EPS, 1.0 - UNIT_EPS)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_len: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_eps: 0.2,
            epochs: 10,
            minibatch: 64,
            rollout_len: 2048,
            value_coef: 0.5,
            entropy_coef: 0.0,
            lr: 3e-4,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, v: f64| Err(Error::Config(format!("ppo.{f} = {v} is out of range")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", self.gamma);
        }
        if !(self.lambda_gae > 0.0 && self.lambda_gae <= 1.0) {
            return bad("lambda_gae", self.lambda_gae);
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps", self.clip_eps);
        }
        if !(self.lr > 0.0) {
            return bad("lr", self.lr);
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", self.max_grad_norm);
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("value_coef/entropy_coef", self.value_coef.min(self.entropy_coef));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_len == 0 {
            return Err(Error::Config("ppo.epochs, ppo.minibatch and ppo.rollout_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Keep supervised pairs across updates instead of clearing them.
    pub accumulate: bool,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { epochs: 10, minibatch: 64, lr: 3e-4, max_grad_norm: 0.5, accumulate: false }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::Config("bc.epochs and bc.minibatch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::Config("bc.lr and bc.max_grad_norm must be positive".into()));
        }
        Ok(())
    }
}

/// RL-chosen transitions grouped into contiguous segments, each closed with
/// a bootstrap value.
#[derive(Debug, Clone, Default)]
pub struct PpoBuffer {
    pub transitions: Vec<Transition>,
    pub bootstraps: Vec<f64>,
    next_segment: u64,
    open: bool,
}

impl PpoBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Appends to the open segment, opening a new one if needed. The
    /// transition's `segment_id` is overwritten.
    pub fn push(&mut self, mut t: Transition) {
        if !self.open {
            self.open = true;
            self.next_segment += 1;
        }
        t.segment_id = self.next_segment - 1;
        self.transitions.push(t);
    }

    pub fn close_segment(&mut self, bootstrap: f64) {
        if self.open {
            self.bootstraps.push(bootstrap);
            self.open = false;
        }
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
        self.bootstraps.clear();
        self.open = false;
    }
}

/// GAE(gamma, lambda) run independently on each segment. `bootstraps[i]` is
/// the value after the last transition of the i-th segment.
pub fn compute_gae(
    transitions: &[Transition],
    bootstraps: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = transitions.len();
    let mut adv = vec![0.0; n];
    let mut ends = Vec::new();
    for i in 0..n {
        if i + 1 == n || transitions[i + 1].segment_id != transitions[i].segment_id {
            ends.push(i);
        }
    }
    if ends.len() != bootstraps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} segments but {} bootstrap values",
            ends.len(),
            bootstraps.len()
        )));
    }
    let mut seg = ends.len();
    let mut next_value = 0.0;
    let mut running = 0.0;
    for i in (0..n).rev() {
        if seg > 0 && ends[seg - 1] == i {
            seg -= 1;
            next_value = bootstraps[seg];
            running = 0.0;
        }
        let t = &transitions[i];
        let delta = t.reward + gamma * next_value - t.value_old;
        running = delta + gamma * lambda * running;
        adv[i] = running;
        next_value = t.value_old;
    }
    let returns = adv.iter().zip(transitions).map(|(a, t)| a + t.value_old).collect();
    Ok((adv, returns))
}

/// Per-sample clipped objective `min(r A, clip(r, 1-eps, 1+eps) A)` and its
/// derivative with respect to `r`.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Loss terms of one PPO minibatch (all means over the batch).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoTerms {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl PpoTerms {
    /// The minimized objective.
    pub fn loss(&self, cfg: &PpoConfig) -> f64 {
        -self.surrogate + cfg.value_coef * self.value_loss - cfg.entropy_coef * self.entropy
    }
}

/// Loss terms and gradients of the minimized objective for one minibatch.
pub fn ppo_minibatch(
    params: &PolicyParams,
    batch: &[(&Transition, f64, f64)],
    cfg: &PpoConfig,
    actor_grads: &mut Gradients,
    critic_grads: &mut Gradients,
) -> Result<PpoTerms> {
    let inv_n = 1.0 / batch.len() as f64;
    let mut terms = PpoTerms::default();
    for (t, adv, ret) in batch {
        let e = params.log_prob_and_entropy(&t.obs, &t.action_unit)?;
        let ratio = (e.log_prob - t.log_prob_old).exp();
        let (obj, dobj_dr) = clipped_objective(ratio, *adv, cfg.clip_eps);
        terms.surrogate += obj * inv_n;
        terms.value_loss += (e.value - ret).powi(2) * inv_n;
        terms.entropy += e.entropy * inv_n;
        terms.approx_kl += (t.log_prob_old - e.log_prob) * inv_n;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            terms.clip_fraction += inv_n;
        }
        let dlogp = -dobj_dr * ratio * inv_n;
        let glp = e.dlogp_dheads();
        let gh = e.dentropy_dheads();
        let dheads: [f64; 4] = std::array::from_fn(|i| dlogp * glp[i] - cfg.entropy_coef * inv_n * gh[i]);
        params.actor_backward(&e, &dheads, actor_grads)?;
        params.critic_backward(&e, 2.0 * cfg.value_coef * (e.value - ret) * inv_n, critic_grads)?;
    }
    Ok(terms)
}

/// Mean squared distance between expert actions and the policy mode, with
/// its actor gradient.
pub fn bc_minibatch(params: &PolicyParams, batch: &[&SlPair], grads: &mut Gradients) -> Result<f64> {
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for p in batch {
        let e = params.log_prob_and_entropy(&p.obs, &p.expert_action_unit)?;
        let mode = e.heads.mode();
        let jac = e.dmode_dheads();
        let mut dheads = [0.0; 4];
        for d in 0..ACT_DIM {
            let err = mode[d] - p.expert_action_unit[d];
            loss += err * err * inv_n;
            dheads[2 * d] = 2.0 * err * inv_n * jac[d][0];
            dheads[2 * d + 1] = 2.0 * err * inv_n * jac[d][1];
        }
        params.actor_backward(&e, &dheads, grads)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BcStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub n_samples: usize,
}

/// Policy parameters together with their optimizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub params: PolicyParams,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub bc_opt: AdamState,
}

fn clip_norm(grads: &mut [&mut Gradients], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

fn minibatches<R: Rng>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(|c| c.to_vec()).collect()
}

impl Learner {
    pub fn new(params: PolicyParams, ppo: &PpoConfig, bc: &BcConfig) -> Self {
        let adam = |lr| AdamConfig { lr, ..AdamConfig::default() };
        Self {
            actor_opt: AdamState::for_net(&params.actor, adam(ppo.lr)),
            critic_opt: AdamState::for_net(&params.critic, adam(ppo.lr)),
            bc_opt: AdamState::for_net(&params.actor, adam(bc.lr)),
            params,
        }
    }

    /// K epochs of shuffled minibatch steps on the clipped surrogate and the
    /// value loss. On a non-finite loss or gradient the learner is restored
    /// to its state before the call and an error is returned.
    pub fn ppo_update<R: Rng>(&mut self, buf: &PpoBuffer, cfg: &PpoConfig, rng: &mut R) -> Result<PpoStats> {
        if buf.is_empty() {
            return Err(Error::InvalidState("ppo update with no transitions".into()));
        }
        let (mut adv, returns) = compute_gae(&buf.transitions, &buf.bootstraps, cfg.gamma, cfg.lambda_gae)?;
        normalize(&mut adv);
        let saved = self.clone();
        let result = self.ppo_epochs(buf, &adv, &returns, cfg, rng);
        if result.is_err() {
            *self = saved;
        }
        result
    }

    fn ppo_epochs<R: Rng>(
        &mut self,
        buf: &PpoBuffer,
        adv: &[f64],
        returns: &[f64],
        cfg: &PpoConfig,
        rng: &mut R,
    ) -> Result<PpoStats> {
        let n = buf.len();
        let mut stats = PpoStats { n_samples: n, ..Default::default() };
        let mut count = 0.0;
        for _ in 0..cfg.epochs {
            for mb in minibatches(n, cfg.minibatch, rng) {
                let batch: Vec<_> = mb.iter().map(|&i| (&buf.transitions[i], adv[i], returns[i])).collect();
                let mut ga = Gradients::zeros_like(&self.params.actor);
                let mut gc = Gradients::zeros_like(&self.params.critic);
                let terms = ppo_minibatch(&self.params, &batch, cfg, &mut ga, &mut gc)?;
                if !terms.loss(cfg).is_finite() || !ga.is_finite() || !gc.is_finite() {
                    return Err(Error::NonFinite("ppo loss".into()));
                }
                let norm = clip_norm(&mut [&mut ga, &mut gc], cfg.max_grad_norm);
                if self.params.actor.adam_step(&ga, &mut self.actor_opt)? == AdamOutcome::SkippedNonFinite
                    || self.params.critic.adam_step(&gc, &mut self.critic_opt)? == AdamOutcome::SkippedNonFinite
                {
                    return Err(Error::NonFinite("ppo gradient".into()));
                }
                stats.surrogate += terms.surrogate;
                stats.value_loss += terms.value_loss;
                stats.entropy += terms.entropy;
                stats.approx_kl += terms.approx_kl;
                stats.clip_fraction += terms.clip_fraction;
                stats.grad_norm += norm;
                count += 1.0;
            }
        }
        stats.surrogate /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.approx_kl /= count;
        stats.clip_fraction /= count;
        stats.grad_norm /= count;
        Ok(stats)
    }

    /// K epochs of minibatch steps regressing the policy mode onto the
    /// expert actions. Only the actor moves.
    pub fn bc_update<R: Rng>(&mut self, pairs: &[SlPair], cfg: &BcConfig, rng: &mut R) -> Result<BcStats> {
        if pairs.is_empty() {
            return Err(Error::InvalidState("bc update with no pairs".into()));
        }
        let saved = self.clone();
        let result = self.bc_epochs(pairs, cfg, rng);
        if result.is_err() {
            *self = saved;
        }
        result
    }

    fn bc_epochs<R: Rng>(&mut self, pairs: &[SlPair], cfg: &BcConfig, rng: &mut R) -> Result<BcStats> {
        let mut stats = BcStats { n_samples: pairs.len(), ..Default::default() };
        let mut count = 0.0;
        for _ in 0..cfg.epochs {
            for mb in minibatches(pairs.len(), cfg.minibatch, rng) {
                let batch: Vec<&SlPair> = mb.iter().map(|&i| &pairs[i]).collect();
                let mut g = Gradients::zeros_like(&self.params.actor);
                let loss = bc_minibatch(&self.params, &batch, &mut g)?;
                if !loss.is_finite() || !g.is_finite() {
                    return Err(Error::NonFinite("bc loss".into()));
                }
                let norm = clip_norm(&mut [&mut g], cfg.max_grad_norm);
                if self.params.actor.adam_step(&g, &mut self.bc_opt)? == AdamOutcome::SkippedNonFinite {
                    return Err(Error::NonFinite("bc gradient".into()));
                }
                stats.loss += loss;
                stats.grad_norm += norm;
                count += 1.0;
            }
        }
        stats.loss /= count;
        stats.grad_norm /= count;
        Ok(stats)
    }
}

/// Zero mean, unit standard deviation. Fewer than two samples are left as is.
fn normalize(v: &mut [f64]) {
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
}

/// One row of the per-update statistics file.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateRecord {
    pub update: usize,
    pub ppo: PpoStats,
    pub bc: BcStats,
    pub n_ppo: usize,
    pub n_sl: usize,
}

pub const UPDATE_HEADER: &str = "update,surrogate,value_loss,entropy,approx_kl,grad_norm,n_ppo,n_sl,bc_loss";

impl UpdateRecord {
    pub fn write_row<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            self.update,
            self.ppo.surrogate,
            self.ppo.value_loss,
            self.ppo.entropy,
            self.ppo.approx_kl,
            self.ppo.grad_norm,
            self.n_ppo,
            self.n_sl,
            self.bc.loss
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::PlantConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> PolicyParams {
        PolicyParams::new(&PlantConfig::default(), &[16, 16], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn tr(reward: f64, value: f64, seg: u64) -> Transition {
        Transition {
            obs: Observation([0.0; 7]),
            action_unit: [0.5, 0.5],
            log_prob_old: 0.0,
            reward,
            value_old: value,
            done: false,
            segment_id: seg,
            source: Source::Rl,
        }
    }

    /// Direct definition: A_t = sum_l (gamma lambda)^l delta_{t+l} within the
    /// segment.
    fn brute_gae(seg: &[Transition], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let n = seg.len();
        let value_at = |i: usize| if i < n { seg[i].value_old } else { bootstrap };
        let deltas: Vec<f64> = (0..n).map(|i| seg[i].reward + gamma * value_at(i + 1) - seg[i].value_old).collect();
        (0..n)
            .map(|t| {
                let mut a = 0.0;
                let mut w = 1.0;
                for d in &deltas[t..] {
                    a += w * d;
                    w *= gamma * lambda;
                }
                a
            })
            .collect()
    }

    #[test]
    fn gae_single_step() {
        let (a, r) = compute_gae(&[tr(1.5, 0.25, 0)], &[2.0], 0.9, 0.95).unwrap();
        assert_eq!(a[0], 1.5 + 0.9 * 2.0 - 0.25);
        assert_eq!(r[0], a[0] + 0.25);
    }

    #[test]
    fn gae_empty() {
        let (a, r) = compute_gae(&[], &[], 0.99, 0.95).unwrap();
        assert!(a.is_empty() && r.is_empty());
        assert!(compute_gae(&[tr(1.0, 0.0, 0)], &[], 0.99, 0.95).is_err());
    }

    #[test]
    fn gae_exhaustive_over_segmentations() {
        // Dyadic data keeps every product and sum exact, so equality is exact.
        let (gamma, lambda) = (0.5, 0.75);
        let rewards = [1.0, -2.0, 0.5, 3.0, -1.25, 0.75];
        let values = [0.25, 1.5, -0.5, 2.0, 0.125, -1.0];
        let boots = [0.5, -0.25, 1.0, 2.5, -0.75, 0.375];
        for len in 1..=6 {
            for mask in 0u32..(1 << (len - 1)) {
                // bit i set: a segment break after transition i
                let mut ts = Vec::new();
                let mut seg = 0;
                for i in 0..len {
                    ts.push(tr(rewards[i], values[i], seg));
                    if mask & (1 << i) != 0 {
                        seg += 1;
                    }
                }
                let n_seg = seg as usize + 1;
                let (adv, ret) = compute_gae(&ts, &boots[..n_seg], gamma, lambda).unwrap();
                let mut start = 0;
                for s in 0..n_seg {
                    let end = (start..len).find(|&i| ts[i].segment_id != s as u64).unwrap_or(len);
                    let oracle = brute_gae(&ts[start..end], boots[s], gamma, lambda);
                    assert_eq!(&adv[start..end], &oracle[..], "len {len} mask {mask:b}");
                    start = end;
                }
                for i in 0..len {
                    assert_eq!(ret[i], adv[i] + values[i]);
                }
            }
        }
    }

    #[test]
    fn gae_lambda_limits() {
        let ts: Vec<_> = [(1.0, 0.3), (0.2, -0.4), (-0.7, 0.9), (1.1, 0.0), (0.4, 0.6)]
            .iter()
            .map(|&(r, v)| tr(r, v, 0))
            .collect();
        let (g, boot) = (0.97, 0.8);
        let (a1, _) = compute_gae(&ts, &[boot], g, 1.0).unwrap();
        for t in 0..5 {
            let mut ret = 0.0;
            for k in t..5 {
                ret += g.powi((k - t) as i32) * ts[k].reward;
            }
            ret += g.powi((5 - t) as i32) * boot;
            assert!((a1[t] - (ret - ts[t].value_old)).abs() < 1e-12);
        }
        let (a0, _) = compute_gae(&ts, &[boot], g, 0.0).unwrap();
        for t in 0..5 {
            let next = if t + 1 < 5 { ts[t + 1].value_old } else { boot };
            assert_eq!(a0[t], ts[t].reward + g * next - ts[t].value_old);
        }
    }

    #[test]
    fn buffer_segments_and_bootstraps() {
        let mut b = PpoBuffer::default();
        b.push(tr(1.0, 0.0, 99));
        b.push(tr(1.0, 0.0, 99));
        b.close_segment(0.5);
        b.close_segment(7.0);
        b.push(tr(1.0, 0.0, 99));
        b.close_segment(0.25);
        let ids: Vec<_> = b.transitions.iter().map(|t| t.segment_id).collect();
        assert_eq!(ids, [0, 0, 1]);
        assert_eq!(b.bootstraps, [0.5, 0.25]);
    }

    #[test]
    fn clip_arithmetic() {
        let (obj, d) = clipped_objective(2.0, 3.0, 0.2);
        assert_eq!(obj, 1.2 * 3.0);
        assert_eq!(d, 0.0);
        let (obj, d) = clipped_objective(1.1, 3.0, 0.2);
        assert_eq!((obj, d), (1.1 * 3.0, 3.0));
        // negative advantage: the pessimistic side keeps the gradient
        let (obj, d) = clipped_objective(0.5, -1.0, 0.2);
        assert_eq!((obj, d), (-0.8, 0.0));
        let (obj, d) = clipped_objective(1.5, -1.0, 0.2);
        assert_eq!((obj, d), (-1.5, -1.0));
    }

    fn random_batch(p: &PolicyParams, rng: &mut ChaCha8Rng, n: usize) -> Vec<(Transition, f64, f64)> {
        (0..n)
            .map(|_| {
                let obs = Observation(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
                let s = p.act_stochastic(&obs, rng).unwrap();
                let t = Transition {
                    obs,
                    action_unit: s.action_unit,
                    log_prob_old: s.log_prob,
                    reward: 0.0,
                    value_old: s.value,
                    done: false,
                    segment_id: 0,
                    source: Source::Rl,
                };
                (t, rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0))
            })
            .collect()
    }

    #[test]
    fn surrogate_at_old_params_is_mean_advantage() {
        let p = params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_batch(&p, &mut rng, 12);
        let batch: Vec<_> = data.iter().map(|(t, a, r)| (t, *a, *r)).collect();
        let mut ga = Gradients::zeros_like(&p.actor);
        let mut gc = Gradients::zeros_like(&p.critic);
        let terms = ppo_minibatch(&p, &batch, &PpoConfig::default(), &mut ga, &mut gc).unwrap();
        let mean_adv = data.iter().map(|d| d.1).sum::<f64>() / 12.0;
        assert!((terms.surrogate - mean_adv).abs() < 1e-14);
        assert_eq!(terms.clip_fraction, 0.0);
        assert_eq!(terms.approx_kl, 0.0);
    }

    #[test]
    fn clipped_loss_gradient_matches_finite_differences() {
        let old = params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_batch(&old, &mut rng, 10);
        // move away from the old parameters so ratios spread and some clip
        let mut p = old.clone();
        for w in p.actor.params_mut() {
            *w += rng.random_range(-0.5..0.5);
        }
        let cfg = PpoConfig { entropy_coef: 0.01, ..PpoConfig::default() };
        let batch: Vec<_> = data.iter().map(|(t, a, r)| (t, *a, *r)).collect();
        let loss = |q: &PolicyParams| {
            let mut ga = Gradients::zeros_like(&q.actor);
            let mut gc = Gradients::zeros_like(&q.critic);
            ppo_minibatch(q, &batch, &cfg, &mut ga, &mut gc).unwrap().loss(&cfg)
        };
        let mut ga = Gradients::zeros_like(&p.actor);
        let mut gc = Gradients::zeros_like(&p.critic);
        let terms = ppo_minibatch(&p, &batch, &cfg, &mut ga, &mut gc).unwrap();
        assert!(terms.clip_fraction > 0.0 && terms.clip_fraction < 1.0, "{}", terms.clip_fraction);

        let h = 1e-6;
        let mut q = p.clone();
        for i in 0..q.actor.num_params() {
            let orig = q.actor.params()[i];
            q.actor.params_mut()[i] = orig + h;
            let fp = loss(&q);
            q.actor.params_mut()[i] = orig - h;
            let fm = loss(&q);
            q.actor.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((ga.0[i] - fd).abs() / (1.0 + ga.0[i].abs()) < 1e-4, "actor {i}: {} vs {fd}", ga.0[i]);
        }
        for i in 0..q.critic.num_params() {
            let orig = q.critic.params()[i];
            q.critic.params_mut()[i] = orig + h;
            let fp = loss(&q);
            q.critic.params_mut()[i] = orig - h;
            let fm = loss(&q);
            q.critic.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((gc.0[i] - fd).abs() / (1.0 + gc.0[i].abs()) < 1e-4, "critic {i}");
        }
    }

    fn buffer_from(data: &[(Transition, f64, f64)], rewards: impl Fn(usize) -> f64) -> PpoBuffer {
        let mut b = PpoBuffer::default();
        for (i, (t, _, _)) in data.iter().enumerate() {
            b.push(Transition { reward: rewards(i), ..*t });
            b.close_segment(0.0);
        }
        b
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let p = params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_batch(&p, &mut rng, 40);
        // reward = value makes every one-step segment's advantage exactly zero
        let buf = buffer_from(&data, |i| data[i].0.value_old);
        let (adv, _) = compute_gae(&buf.transitions, &buf.bootstraps, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        let mut l = Learner::new(p.clone(), &PpoConfig::default(), &BcConfig::default());
        let cfg = PpoConfig { epochs: 3, minibatch: 8, ..PpoConfig::default() };
        l.ppo_update(&buf, &cfg, &mut rng).unwrap();
        assert_eq!(l.params.actor.params(), p.actor.params());
    }

    #[test]
    fn positive_advantage_raises_log_prob() {
        let p = params(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_batch(&p, &mut rng, 1);
        let buf = buffer_from(&data, |_| data[0].0.value_old + 1.0);
        let mut l = Learner::new(p.clone(), &PpoConfig::default(), &BcConfig::default());
        l.ppo_update(&buf, &PpoConfig { epochs: 1, ..PpoConfig::default() }, &mut rng).unwrap();
        let t = &data[0].0;
        let after = l.params.log_prob_and_entropy(&t.obs, &t.action_unit).unwrap().log_prob;
        assert!(after > t.log_prob_old);
    }

    #[test]
    fn non_finite_reward_restores_learner() {
        let p = params(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = random_batch(&p, &mut rng, 10);
        let buf = buffer_from(&data, |i| if i == 3 { f64::NAN } else { 0.0 });
        let mut l = Learner::new(p, &PpoConfig::default(), &BcConfig::default());
        let before = l.clone();
        assert!(matches!(l.ppo_update(&buf, &PpoConfig::default(), &mut rng), Err(Error::NonFinite(_))));
        assert_eq!(l, before);
    }

    #[test]
    fn bc_at_mode_has_zero_loss_and_gradient() {
        let p = params(11);
        let obs = Observation([0.3, -0.2, 0.1, 1.0, 0.0, 0.5, -0.1]);
        let m = p.heads(&obs).unwrap().0.mode();
        let pair = SlPair::new(obs, m);
        let mut g = Gradients::zeros_like(&p.actor);
        let loss = bc_minibatch(&p, &[&pair], &mut g).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bc_gradient_matches_finite_differences() {
        let p = params(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pairs: Vec<SlPair> = (0..6)
            .map(|_| {
                let o = Observation(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
                SlPair::new(o, [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            })
            .collect();
        let refs: Vec<&SlPair> = pairs.iter().collect();
        let mut g = Gradients::zeros_like(&p.actor);
        bc_minibatch(&p, &refs, &mut g).unwrap();
        let mut q = p.clone();
        let h = 1e-6;
        for i in 0..q.actor.num_params() {
            let orig = q.actor.params()[i];
            let mut scratch = Gradients::zeros_like(&q.actor);
            q.actor.params_mut()[i] = orig + h;
            let fp = bc_minibatch(&q, &refs, &mut scratch).unwrap();
            q.actor.params_mut()[i] = orig - h;
            let fm = bc_minibatch(&q, &refs, &mut scratch).unwrap();
            q.actor.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((g.0[i] - fd).abs() / (1.0 + g.0[i].abs()) < 1e-4, "param {i}");
        }
    }

    #[test]
    fn bc_loss_is_flat_along_mode_level_set() {
        let p = params(14);
        let obs = Observation([1.0, 0.4, -0.1, 0.2, 0.3, -0.5, 0.0]);
        let pair = SlPair::new(obs, [0.9, 0.2]);
        let e = p.log_prob_and_entropy(&obs, &pair.expert_action_unit).unwrap();
        let (a, b) = (e.heads.alpha, e.heads.beta);
        let jac = e.dmode_dheads();
        let mode = e.heads.mode();
        for d in 0..ACT_DIM {
            // dL/d(alpha, beta) is proportional to the mode Jacobian
            let g = [2.0 * (mode[d] - 0.9) * jac[d][0], 2.0 * (mode[d] - 0.9) * jac[d][1]];
            let along = g[0] * (a[d] - 1.0) + g[1] * (b[d] - 1.0);
            assert!(along.abs() < 1e-12 * (1.0 + g[0].abs() + g[1].abs()));
            // moving the heads along (alpha - 1, beta - 1) keeps the mode
            let s = 0.37;
            let m2 = crate::policy::beta_mode(1.0 + (a[d] - 1.0) * (1.0 + s), 1.0 + (b[d] - 1.0) * (1.0 + s));
            assert!((m2 - mode[d]).abs() < 1e-14);
        }
    }

    #[test]
    fn bc_converges_on_single_pair_and_spares_critic() {
        let p = params(15);
        let obs = Observation([2.0, 0.7, 0.0, 0.5, -0.3, 0.2, 0.0]);
        let pair = SlPair::new(obs, [0.85, 0.3]);
        let bc = BcConfig::default();
        let mut l = Learner::new(p.clone(), &PpoConfig::default(), &bc);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..200 {
            l.bc_update(&[pair], &bc, &mut rng).unwrap();
        }
        let m = l.params.heads(&obs).unwrap().0.mode();
        assert!((m[0] - 0.85).abs() < 1e-2 && (m[1] - 0.3).abs() < 1e-2, "{m:?}");
        assert_eq!(l.params.critic, p.critic);
    }

    #[test]
    fn update_record_row() {
        let mut out = Vec::new();
        UpdateRecord { update: 3, n_ppo: 10, n_sl: 5, ..Default::default() }.write_row(&mut out).unwrap();
        let line = String::from_utf8(out).unwrap();
        assert_eq!(line.trim().split(',').count(), UPDATE_HEADER.split(',').count());
        assert!(line.starts_with("3,"));
    }
}
