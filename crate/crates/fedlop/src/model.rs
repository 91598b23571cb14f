//! The split client network and its training loss.
//!
//! A client holds up to three dense sub-networks:
//!
//! - a **global part** (shared; uploaded and averaged during federation),
//! - an optional **local part** (private, same shape as the global part so
//!   the two can be compared parameter-by-parameter),
//! - a **head** (private classifier).
//!
//! Wiring decides which features feed which sub-network and what the head
//! concatenates. The separation penalty `exp(-|w_g - w_l| / (|w_g| + |w_l|))`
//! rewards the global and local parts for occupying different subspaces; it
//! enters the loss scaled by `alpha` and is minimized alongside the summed
//! cross-entropy.

use serde::{Deserialize, Serialize};

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, flatten_params, mlp_backward, mlp_forward, mlp_init, seeded_rng, sgd_momentum_step,
    softmax, unflatten_params, ForwardTrace, Gradients, Matrix, MlpParams, MlpSpec, OptimizerState,
    OutputKind, SeededRng,
};

/// Which features feed which sub-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wiring {
    /// Sub-parts see only shareable features; the head sees
    /// `[global_out ; local_out ; private_features]`.
    SplitPrivate,
    /// Sub-parts see all features; the head sees `[global_out ; local_out]`.
    SplitFull,
    /// One body sees all features; the head sees `[body_out ; private_features]`.
    SingleBody,
}

impl Wiring {
    pub fn has_local_part(self) -> bool {
        matches!(self, Wiring::SplitPrivate | Wiring::SplitFull)
    }
}

/// Layer widths for the sub-parts and the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Hidden and output widths of each sub-part (input width comes from
    /// the data): the last entry is the representation width.
    pub subpart_layers: Vec<usize>,
    /// Hidden widths of the head; the output width is `classes`.
    pub head_layers: Vec<usize>,
    pub classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { subpart_layers: vec![22, 11, 6], head_layers: vec![20, 13], classes: 5 }
    }
}

/// Scalar training knobs shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Local SGD steps per communication round (tau).
    pub local_steps: usize,
    /// Weight of the separation penalty.
    pub alpha: f64,
    /// Mini-batch size; `None` trains on the full local set every step.
    pub batch_size: Option<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learning_rate: 0.01,
            momentum: 0.5,
            local_steps: 15,
            alpha: 0.1,
            batch_size: None,
        }
    }
}

/// One sub-network bundled with its optimizer state.
#[derive(Debug, Clone)]
pub struct Part {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub opt: OptimizerState,
}

impl Part {
    fn new(spec: MlpSpec, hp: &HyperParams, rng: &mut SeededRng) -> Self {
        let params = mlp_init(&spec, rng);
        let opt = OptimizerState::new(&params, hp.learning_rate, hp.momentum);
        Part { spec, params, opt }
    }
}

/// Names the three parameter groups of a client network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// The shared sub-network ("body" for single-body baselines).
    Global,
    Local,
    Head,
}

/// A client's full model: wiring plus up to three trainable parts.
#[derive(Debug, Clone)]
pub struct ClientNetwork {
    pub wiring: Wiring,
    pub global: Part,
    pub local: Option<Part>,
    pub head: Part,
    star_dim: usize,
    prime_dim: usize,
}

impl ClientNetwork {
    /// Builds and randomly initializes a client network. Initialization
    /// order is global, then local, then head, off one RNG stream, so equal
    /// seeds give equal networks.
    pub fn new(
        wiring: Wiring,
        star_dim: usize,
        prime_dim: usize,
        arch: &ArchConfig,
        hp: &HyperParams,
        seed: u64,
    ) -> Result<Self> {
        if star_dim == 0 {
            return Err(Error::invalid("shareable feature dimension must be >= 1"));
        }
        let mut rng = seeded_rng(seed);
        let sub_in = match wiring {
            Wiring::SplitPrivate => star_dim,
            Wiring::SplitFull | Wiring::SingleBody => star_dim + prime_dim,
        };
        let mut sub_sizes = vec![sub_in];
        sub_sizes.extend_from_slice(&arch.subpart_layers);
        let sub_spec = MlpSpec::new(sub_sizes, OutputKind::Linear)?;
        let rep = sub_spec.output_size();

        let head_in = match wiring {
            Wiring::SplitPrivate => 2 * rep + prime_dim,
            Wiring::SplitFull => 2 * rep,
            Wiring::SingleBody => rep + prime_dim,
        };
        let mut head_sizes = vec![head_in];
        head_sizes.extend_from_slice(&arch.head_layers);
        head_sizes.push(arch.classes);
        let head_spec = MlpSpec::new(head_sizes, OutputKind::Softmax)?;

        let global = Part::new(sub_spec.clone(), hp, &mut rng);
        let local = wiring
            .has_local_part()
            .then(|| Part::new(sub_spec, hp, &mut rng));
        let head = Part::new(head_spec, hp, &mut rng);
        Ok(ClientNetwork { wiring, global, local, head, star_dim, prime_dim })
    }

    pub fn classes(&self) -> usize {
        self.head.spec.output_size()
    }

    /// Width of each sub-part's output representation.
    pub fn representation_width(&self) -> usize {
        self.global.spec.output_size()
    }

    fn part(&self, group: ParamGroup) -> Option<&Part> {
        match group {
            ParamGroup::Global => Some(&self.global),
            ParamGroup::Local => self.local.as_ref(),
            ParamGroup::Head => Some(&self.head),
        }
    }

    fn part_mut(&mut self, group: ParamGroup) -> Option<&mut Part> {
        match group {
            ParamGroup::Global => Some(&mut self.global),
            ParamGroup::Local => self.local.as_mut(),
            ParamGroup::Head => Some(&mut self.head),
        }
    }

    /// Canonical flattening of the listed groups, in the order given.
    pub fn flatten_groups(&self, groups: &[ParamGroup]) -> Vec<f64> {
        let mut out = Vec::new();
        for &g in groups {
            if let Some(p) = self.part(g) {
                out.extend(flatten_params(&p.params));
            }
        }
        out
    }

    /// Overwrites the listed groups from a canonical flat vector.
    pub fn install_groups(&mut self, groups: &[ParamGroup], flat: &[f64]) -> Result<()> {
        let mut ofs = 0;
        for &g in groups {
            if let Some(p) = self.part_mut(g) {
                let n = p.params.param_count();
                if ofs + n > flat.len() {
                    return Err(Error::shape(format!(
                        "flat vector too short for groups: need more than {}",
                        flat.len()
                    )));
                }
                p.params = unflatten_params(&p.params, &flat[ofs..ofs + n])?;
                ofs += n;
            }
        }
        if ofs != flat.len() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, groups need {ofs}",
                flat.len()
            )));
        }
        Ok(())
    }

    /// The sub-part input for a batch, per wiring.
    fn sub_input(&self, batch: &[EncodedSample]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .map(|s| match self.wiring {
                Wiring::SplitPrivate => s.f_star.clone(),
                _ => s.full_vector(),
            })
            .collect();
        let m = Matrix::from_rows(&rows)?;
        let want = self.global.spec.input_size();
        if m.cols() != want {
            return Err(Error::shape(format!(
                "sub-part input has {} features, network expects {want}",
                m.cols()
            )));
        }
        Ok(m)
    }

    fn prime_matrix(&self, batch: &[EncodedSample]) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = batch.iter().map(|s| s.f_prime.clone()).collect();
        let m = Matrix::from_rows(&rows)?;
        if self.uses_prime_at_head() && m.cols() != self.prime_dim {
            return Err(Error::shape(format!(
                "private features have {} dims, network expects {}",
                m.cols(),
                self.prime_dim
            )));
        }
        Ok(m)
    }

    fn uses_prime_at_head(&self) -> bool {
        matches!(self.wiring, Wiring::SplitPrivate | Wiring::SingleBody)
    }
}

/// All intermediates of one batched client forward pass.
pub struct ClientTraces {
    pub global: ForwardTrace,
    pub local: Option<ForwardTrace>,
    pub head: ForwardTrace,
    /// Raw head outputs, one row per sample.
    pub logits: Matrix,
}

/// Batched forward pass: sub-parts, concatenation, head. Softmax is not
/// applied here; it belongs to the loss and to [`client_forward`].
pub fn client_forward_batch(net: &ClientNetwork, batch: &[EncodedSample]) -> Result<ClientTraces> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let sub_in = net.sub_input(batch)?;
    let (g_trace, g_out) = mlp_forward(&net.global.params, &sub_in)?;
    let (l_trace, l_out) = match &net.local {
        Some(local) => {
            let (t, o) = mlp_forward(&local.params, &sub_in)?;
            (Some(t), Some(o))
        }
        None => (None, None),
    };
    let prime = net.prime_matrix(batch)?;
    let mut parts: Vec<&Matrix> = vec![&g_out];
    if let Some(ref lo) = l_out {
        parts.push(lo);
    }
    if net.uses_prime_at_head() {
        parts.push(&prime);
    }
    let head_in = Matrix::hcat(&parts)?;
    let (h_trace, logits) = mlp_forward(&net.head.params, &head_in)?;
    Ok(ClientTraces { global: g_trace, local: l_trace, head: h_trace, logits })
}

/// Single-sample forward pass returning class probabilities. Concatenation
/// order at the head is fixed: global, local, then raw private features.
pub fn client_forward(
    net: &ClientNetwork,
    f_star: &[f64],
    f_prime: &[f64],
) -> Result<Vec<f64>> {
    let sample = EncodedSample {
        f_star: f_star.to_vec(),
        f_prime: f_prime.to_vec(),
        label: 0,
    };
    let traces = client_forward_batch(net, std::slice::from_ref(&sample))?;
    Ok(softmax(traces.logits.row(0)))
}

/// The subspace-separation penalty `exp(-d/s)` with `d = |a-b|` and
/// `s = |a| + |b|` over flattened parameter vectors. Returns the value and
/// a flag that is true only in the degenerate all-zero case, where the
/// value is defined as the equal-parameter limit 1.0.
pub fn separation_penalty(w_tilde: &[f64], w_hat: &[f64]) -> Result<(f64, bool)> {
    if w_tilde.len() != w_hat.len() {
        return Err(Error::shape(format!(
            "penalty operands differ in length: {} vs {}",
            w_tilde.len(),
            w_hat.len()
        )));
    }
    let s = norm(w_tilde) + norm(w_hat);
    if s == 0.0 {
        return Ok((1.0, true));
    }
    let d = dist(w_tilde, w_hat);
    Ok(((-d / s).exp(), false))
}

/// Analytic gradient of [`separation_penalty`] w.r.t. both operands.
/// Undefined at `w_tilde == w_hat`; callers skip the penalty gradient for
/// that step.
pub fn separation_penalty_grads(
    w_tilde: &[f64],
    w_hat: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if w_tilde.len() != w_hat.len() {
        return Err(Error::shape(format!(
            "penalty operands differ in length: {} vs {}",
            w_tilde.len(),
            w_hat.len()
        )));
    }
    let d = dist(w_tilde, w_hat);
    if d == 0.0 {
        return Err(Error::DegeneratePenalty);
    }
    let nt = norm(w_tilde);
    let nh = norm(w_hat);
    let s = nt + nh;
    let e = (-d / s).exp();
    let s2 = s * s;
    let mut grad_tilde = Vec::with_capacity(w_tilde.len());
    let mut grad_hat = Vec::with_capacity(w_hat.len());
    for i in 0..w_tilde.len() {
        let diff = w_tilde[i] - w_hat[i];
        // d(norm)/dw is w/|w|; treat the all-zero operand as subgradient 0
        let dt = if nt > 0.0 { w_tilde[i] / nt } else { 0.0 };
        let dh = if nh > 0.0 { w_hat[i] / nh } else { 0.0 };
        grad_tilde.push(e * (d * dt - s * diff / d) / s2);
        grad_hat.push(e * (d * dh + s * diff / d) / s2);
    }
    Ok((grad_tilde, grad_hat))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Summed cross-entropy over the batch plus, when enabled and a local part
/// exists, `alpha` times the separation penalty.
pub fn client_loss(
    net: &ClientNetwork,
    batch: &[EncodedSample],
    alpha: f64,
    separation_enabled: bool,
) -> Result<f64> {
    let traces = client_forward_batch(net, batch)?;
    let mut loss = 0.0;
    for (r, sample) in batch.iter().enumerate() {
        let probs = softmax(traces.logits.row(r));
        loss += cross_entropy(&probs, sample.label)?.0;
    }
    if separation_enabled {
        if let Some(local) = &net.local {
            let (e, _) = separation_penalty(
                &flatten_params(&net.global.params),
                &flatten_params(&local.params),
            )?;
            loss += alpha * e;
        }
    }
    Ok(loss)
}

/// Loss plus gradients for every part, assembled from backprop through the
/// head (chaining into the sub-parts via the head's input gradient) and the
/// analytic penalty gradient.
pub fn client_loss_grads(
    net: &ClientNetwork,
    batch: &[EncodedSample],
    alpha: f64,
    separation_enabled: bool,
) -> Result<(f64, Gradients, Option<Gradients>, Gradients)> {
    let traces = client_forward_batch(net, batch)?;
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(batch.len(), net.classes());
    for (r, sample) in batch.iter().enumerate() {
        let probs = softmax(traces.logits.row(r));
        let (l, d) = cross_entropy(&probs, sample.label)?;
        loss += l;
        dlogits.row_mut(r).copy_from_slice(&d);
    }
    let head_grads = mlp_backward(&net.head.params, &traces.head, &dlogits)?;
    let d_head_in = head_grads
        .d_input
        .as_ref()
        .expect("backward always yields an input gradient");

    let rep = net.representation_width();
    let d_global = d_head_in.col_slice(0, rep);
    let mut global_grads = mlp_backward(&net.global.params, &traces.global, &d_global)?;

    let mut local_grads = match (&net.local, &traces.local) {
        (Some(local), Some(l_trace)) => {
            let d_local = d_head_in.col_slice(rep, rep);
            Some(mlp_backward(&local.params, l_trace, &d_local)?)
        }
        _ => None,
    };

    if separation_enabled {
        if let (Some(local), Some(lg)) = (&net.local, local_grads.as_mut()) {
            let wt = flatten_params(&net.global.params);
            let wh = flatten_params(&local.params);
            match separation_penalty_grads(&wt, &wh) {
                Ok((gt, gh)) => {
                    let (e, _) = separation_penalty(&wt, &wh)?;
                    loss += alpha * e;
                    global_grads.add_flat(&gt, alpha)?;
                    lg.add_flat(&gh, alpha)?;
                }
                // identical sub-parts: keep the value term, skip the
                // (undefined) gradient for this step
                Err(Error::DegeneratePenalty) => {
                    let (e, _) = separation_penalty(&wt, &wh)?;
                    loss += alpha * e;
                }
                Err(other) => return Err(other),
            }
        }
    }
    Ok((loss, global_grads, local_grads, head_grads))
}

/// Which groups step in which phase of a local update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateSchedule {
    /// All present groups update jointly on every step.
    Joint,
    /// Head-only steps followed by body-only steps (representation-learning
    /// baselines).
    HeadThenBody { head_steps: usize, body_steps: usize },
}

/// A proximal pull of the listed groups toward a reference vector, added to
/// the loss as `(mu/2) |w - ref|^2`.
pub struct ProxPull<'a> {
    pub mu: f64,
    pub reference: &'a [f64],
    pub groups: &'a [ParamGroup],
}

/// Everything a client needs for one round's local update.
pub struct LocalUpdate<'a> {
    pub hp: &'a HyperParams,
    pub separation_enabled: bool,
    pub schedule: UpdateSchedule,
    pub prox: Option<ProxPull<'a>>,
    /// Seed for this round's mini-batch shuffle; derive it from
    /// (run seed, client id, round) so simulated and distributed runs agree.
    pub shuffle_seed: u64,
}

/// Result of a local update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalReport {
    /// Per-sample training loss over the full local set after the update.
    pub train_loss: f64,
    pub steps: usize,
}

/// Runs the scheduled SGD steps on the client's own data. With
/// `schedule = Joint`, every present group updates on each of the tau steps;
/// gradients reach the sub-parts through the head via input-gradient
/// chaining.
pub fn client_local_update(
    net: &mut ClientNetwork,
    train: &[EncodedSample],
    update: &LocalUpdate,
) -> Result<LocalReport> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let hp = update.hp;
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(bs) = hp.batch_size {
        if bs == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        let mut rng = seeded_rng(update.shuffle_seed);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
    }
    let batch_at = |step: usize| -> Vec<EncodedSample> {
        match hp.batch_size {
            None => train.to_vec(),
            Some(bs) => {
                let start = (step * bs) % n;
                (0..bs.min(n))
                    .map(|j| train[order[(start + j) % n]].clone())
                    .collect()
            }
        }
    };

    let mut steps_taken = 0usize;
    let mut do_step = |net: &mut ClientNetwork, step: usize, groups: &[ParamGroup]| -> Result<()> {
        let batch = batch_at(step);
        let (_, mut g, mut l, mut h) =
            client_loss_grads(net, &batch, hp.alpha, update.separation_enabled)?;
        if let Some(prox) = &update.prox {
            let current = net.flatten_groups(prox.groups);
            if current.len() != prox.reference.len() {
                return Err(Error::shape("proximal reference length mismatch".into()));
            }
            let pull: Vec<f64> = current
                .iter()
                .zip(prox.reference)
                .map(|(w, r)| prox.mu * (w - r))
                .collect();
            let mut ofs = 0;
            for &grp in prox.groups {
                let target = match grp {
                    ParamGroup::Global => Some(&mut g),
                    ParamGroup::Local => l.as_mut(),
                    ParamGroup::Head => Some(&mut h),
                };
                if let (Some(t), Some(p)) = (target, net.part(grp)) {
                    let cnt = p.params.param_count();
                    t.add_flat(&pull[ofs..ofs + cnt], 1.0)?;
                    ofs += cnt;
                }
            }
        }
        for &grp in groups {
            let grads = match grp {
                ParamGroup::Global => Some(&g),
                ParamGroup::Local => l.as_ref(),
                ParamGroup::Head => Some(&h),
            };
            if let (Some(grads), Some(part)) = (grads, net.part_mut(grp)) {
                sgd_momentum_step(&mut part.params, grads, &mut part.opt);
            }
        }
        steps_taken += 1;
        Ok(())
    };

    match update.schedule {
        UpdateSchedule::Joint => {
            let groups: Vec<ParamGroup> = if net.local.is_some() {
                vec![ParamGroup::Global, ParamGroup::Local, ParamGroup::Head]
            } else {
                vec![ParamGroup::Global, ParamGroup::Head]
            };
            for step in 0..hp.local_steps {
                do_step(net, step, &groups)?;
            }
        }
        UpdateSchedule::HeadThenBody { head_steps, body_steps } => {
            for step in 0..head_steps {
                do_step(net, step, &[ParamGroup::Head])?;
            }
            for step in 0..body_steps {
                do_step(net, head_steps + step, &[ParamGroup::Global])?;
            }
        }
    }

    let train_loss = client_loss(net, train, hp.alpha, update.separation_enabled)? / n as f64;
    Ok(LocalReport { train_loss, steps: steps_taken })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_gradient, max_relative_error};
    use rand::Rng;

    fn tiny_net(wiring: Wiring, seed: u64) -> ClientNetwork {
        let arch = ArchConfig { subpart_layers: vec![4, 3], head_layers: vec![6], classes: 5 };
        ClientNetwork::new(wiring, 3, 4, &arch, &HyperParams::default(), seed).unwrap()
    }

    fn sample(seed: u64, star: usize, prime: usize, label: usize) -> EncodedSample {
        let mut rng = seeded_rng(seed);
        EncodedSample {
            f_star: (0..star).map(|_| rng.random_range(0.0..1.0)).collect(),
            f_prime: (0..prime).map(|_| rng.random_range(0.0..1.0)).collect(),
            label,
        }
    }

    #[test]
    fn penalty_value_closed_forms() {
        let a = vec![0.5, -0.25, 1.5];
        let (e, deg) = separation_penalty(&a, &a).unwrap();
        assert_eq!(e, 1.0);
        assert!(!deg);

        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let (e, _) = separation_penalty(&a, &b).unwrap();
        assert!((e - 0.36787944117144233).abs() < 1e-12);

        let (e, _) = separation_penalty(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((e - 0.4930686913952398).abs() < 1e-12);

        let (e, deg) = separation_penalty(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(e, 1.0);
        assert!(deg);

        assert!(separation_penalty(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn penalty_grads_match_finite_differences() {
        let mut rng = seeded_rng(17);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let n = rng.random_range(2..10);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (ga, gb) = separation_penalty_grads(&a, &b).unwrap();
            let eps = 1e-6;
            for i in 0..n {
                let mut ap = a.clone();
                ap[i] += eps;
                let (up, _) = separation_penalty(&ap, &b).unwrap();
                ap[i] = a[i] - eps;
                let (down, _) = separation_penalty(&ap, &b).unwrap();
                let fd = (up - down) / (2.0 * eps);
                let denom = fd.abs().max(ga[i].abs()).max(1e-8);
                worst = worst.max((fd - ga[i]).abs() / denom);

                let mut bp = b.clone();
                bp[i] += eps;
                let (up, _) = separation_penalty(&a, &bp).unwrap();
                bp[i] = b[i] - eps;
                let (down, _) = separation_penalty(&a, &bp).unwrap();
                let fd = (up - down) / (2.0 * eps);
                let denom = fd.abs().max(gb[i].abs()).max(1e-8);
                worst = worst.max((fd - gb[i]).abs() / denom);
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn penalty_gradient_descends() {
        // following -grad must decrease E (push the antipodal pair apart)
        let a = vec![1.0, 0.5, -0.5];
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let (ga, gb) = separation_penalty_grads(&a, &b).unwrap();
        let eta = 1e-3;
        let a2: Vec<f64> = a.iter().zip(&ga).map(|(v, g)| v - eta * g).collect();
        let b2: Vec<f64> = b.iter().zip(&gb).map(|(v, g)| v - eta * g).collect();
        let (e0, _) = separation_penalty(&a, &b).unwrap();
        let (e1, _) = separation_penalty(&a2, &b2).unwrap();
        assert!(e1 < e0);
    }

    #[test]
    fn penalty_is_scale_invariant() {
        let mut rng = seeded_rng(23);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        // directional derivative along (a, b) via central differences
        let h = 1e-3;
        let scale = |v: &[f64], c: f64| -> Vec<f64> { v.iter().map(|x| c * x).collect() };
        let (up, _) = separation_penalty(&scale(&a, 1.0 + h), &scale(&b, 1.0 + h)).unwrap();
        let (down, _) = separation_penalty(&scale(&a, 1.0 - h), &scale(&b, 1.0 - h)).unwrap();
        assert!(((up - down) / (2.0 * h)).abs() < 1e-9);

        let (e0, _) = separation_penalty(&a, &b).unwrap();
        let (e1, _) = separation_penalty(&scale(&a, 3.7), &scale(&b, 3.7)).unwrap();
        assert!((e0 - e1).abs() < 1e-12);
    }

    #[test]
    fn forward_zero_net_is_uniform() {
        let mut net = tiny_net(Wiring::SplitPrivate, 5);
        for part in [&mut net.global, net.local.as_mut().unwrap(), &mut net.head] {
            for layer in &mut part.params.layers {
                layer.weights.iter_mut().for_each(|w| *w = 0.0);
                layer.biases.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let probs = client_forward(&net, &[0.3, 0.4, 0.5], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        for p in &probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_probabilities_sum_to_one() {
        let net = tiny_net(Wiring::SplitPrivate, 6);
        let probs = client_forward(&net, &[0.3, 0.4, 0.5], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let net = tiny_net(Wiring::SplitPrivate, 6);
        assert!(client_forward(&net, &[0.3, 0.4], &[0.1, 0.2, 0.3, 0.4]).is_err());
        assert!(client_forward(&net, &[0.3, 0.4, 0.5], &[0.1]).is_err());
    }

    #[test]
    fn default_arch_head_input_is_27() {
        let net = ClientNetwork::new(
            Wiring::SplitPrivate,
            12,
            15,
            &ArchConfig::default(),
            &HyperParams::default(),
            1,
        )
        .unwrap();
        assert_eq!(net.head.spec.input_size(), 27);
        assert_eq!(net.representation_width(), 6);
        assert_eq!(net.classes(), 5);
    }

    #[test]
    fn loss_without_penalty_is_plain_cross_entropy() {
        let net = tiny_net(Wiring::SplitPrivate, 8);
        let batch: Vec<EncodedSample> = (0..4).map(|i| sample(i, 3, 4, (i % 5) as usize)).collect();
        let with = client_loss(&net, &batch, 0.0, true).unwrap();
        let traces = client_forward_batch(&net, &batch).unwrap();
        let mut expect = 0.0;
        for (r, s) in batch.iter().enumerate() {
            expect += cross_entropy(&softmax(traces.logits.row(r)), s.label).unwrap().0;
        }
        assert!((with - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_with_identical_subparts_adds_alpha() {
        let mut net = tiny_net(Wiring::SplitPrivate, 9);
        let local = net.local.as_mut().unwrap();
        local.params = net.global.params.clone();
        let batch = vec![sample(3, 3, 4, 2)];
        let without = client_loss(&net, &batch, 0.0, false).unwrap();
        let with = client_loss(&net, &batch, 1.0, true).unwrap();
        assert!((with - (without + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier_has_negligible_loss() {
        let mut net = tiny_net(Wiring::SplitPrivate, 10);
        for part in [&mut net.global, net.local.as_mut().unwrap(), &mut net.head] {
            for layer in &mut part.params.layers {
                layer.weights.iter_mut().for_each(|w| *w = 0.0);
                layer.biases.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        // bias the head output hard toward class 3
        net.head.params.layers.last_mut().unwrap().biases[3] = 60.0;
        let batch = vec![sample(4, 3, 4, 3)];
        let loss = client_loss(&net, &batch, 0.0, false).unwrap();
        assert!(loss < 1e-6);
    }

    /// Assembled client gradient against central differences over every
    /// parameter of all three parts, penalty included.
    #[test]
    fn client_gradients_match_finite_differences() {
        for seed in [1u64, 2, 3] {
            let net = tiny_net(Wiring::SplitPrivate, 100 + seed);
            let batch: Vec<EncodedSample> =
                (0..3).map(|i| sample(seed * 10 + i, 3, 4, ((i + seed) % 5) as usize)).collect();
            let alpha = 0.1;
            let (_, g, l, h) = client_loss_grads(&net, &batch, alpha, true).unwrap();

            for (group, analytic) in
                [(ParamGroup::Global, &g), (ParamGroup::Local, l.as_ref().unwrap()), (ParamGroup::Head, &h)]
            {
                let numeric = finite_diff_gradient(
                    |probe| {
                        let mut n2 = net.clone();
                        match group {
                            ParamGroup::Global => n2.global.params = probe.clone(),
                            ParamGroup::Local => n2.local.as_mut().unwrap().params = probe.clone(),
                            ParamGroup::Head => n2.head.params = probe.clone(),
                        }
                        client_loss(&n2, &batch, alpha, true).unwrap()
                    },
                    &net.part(group).unwrap().params,
                    1e-6,
                );
                let err = max_relative_error(analytic, &numeric);
                assert!(err < 1e-5, "{group:?} max relative error {err}");
            }
        }
    }

    #[test]
    fn local_update_zero_steps_is_identity() {
        let mut net = tiny_net(Wiring::SplitPrivate, 11);
        let snapshot = net.global.params.clone();
        let hp = HyperParams { local_steps: 0, ..Default::default() };
        let train: Vec<EncodedSample> = (0..4).map(|i| sample(i, 3, 4, 1)).collect();
        let update = LocalUpdate {
            hp: &hp,
            separation_enabled: true,
            schedule: UpdateSchedule::Joint,
            prox: None,
            shuffle_seed: 0,
        };
        let report = client_local_update(&mut net, &train, &update).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(net.global.params, snapshot);
    }

    #[test]
    fn local_update_zero_lr_is_identity() {
        let mut net = tiny_net(Wiring::SplitPrivate, 12);
        let snapshot = (
            net.global.params.clone(),
            net.local.as_ref().unwrap().params.clone(),
            net.head.params.clone(),
        );
        let hp = HyperParams { learning_rate: 0.0, local_steps: 7, ..Default::default() };
        let train: Vec<EncodedSample> = (0..4).map(|i| sample(i, 3, 4, 1)).collect();
        let mut net2 = net.clone();
        net2.global.opt.learning_rate = 0.0;
        net2.local.as_mut().unwrap().opt.learning_rate = 0.0;
        net2.head.opt.learning_rate = 0.0;
        let update = LocalUpdate {
            hp: &hp,
            separation_enabled: true,
            schedule: UpdateSchedule::Joint,
            prox: None,
            shuffle_seed: 0,
        };
        client_local_update(&mut net2, &train, &update).unwrap();
        assert_eq!(net2.global.params, snapshot.0);
        assert_eq!(net2.local.as_ref().unwrap().params, snapshot.1);
        assert_eq!(net2.head.params, snapshot.2);
    }

    #[test]
    fn local_update_trains_all_groups() {
        let mut net = tiny_net(Wiring::SplitPrivate, 13);
        let before = (
            net.global.params.clone(),
            net.local.as_ref().unwrap().params.clone(),
            net.head.params.clone(),
        );
        let hp = HyperParams { local_steps: 3, batch_size: Some(2), ..Default::default() };
        let train: Vec<EncodedSample> = (0..6).map(|i| sample(i, 3, 4, (i % 5) as usize)).collect();
        let update = LocalUpdate {
            hp: &hp,
            separation_enabled: true,
            schedule: UpdateSchedule::Joint,
            prox: None,
            shuffle_seed: 77,
        };
        client_local_update(&mut net, &train, &update).unwrap();
        assert_ne!(net.global.params, before.0);
        assert_ne!(net.local.as_ref().unwrap().params, before.1);
        assert_ne!(net.head.params, before.2);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut net = tiny_net(Wiring::SplitPrivate, 14);
        let hp = HyperParams::default();
        let update = LocalUpdate {
            hp: &hp,
            separation_enabled: true,
            schedule: UpdateSchedule::Joint,
            prox: None,
            shuffle_seed: 0,
        };
        assert!(client_local_update(&mut net, &[], &update).is_err());
    }

    #[test]
    fn head_then_body_schedule_counts_steps() {
        let mut net = tiny_net(Wiring::SingleBody, 15);
        let head_before = net.head.params.clone();
        let body_before = net.global.params.clone();
        let hp = HyperParams { local_steps: 15, batch_size: Some(2), ..Default::default() };
        let train: Vec<EncodedSample> = (0..6).map(|i| sample(i, 3, 4, (i % 5) as usize)).collect();
        let update = LocalUpdate {
            hp: &hp,
            separation_enabled: false,
            schedule: UpdateSchedule::HeadThenBody { head_steps: 15, body_steps: 1 },
            prox: None,
            shuffle_seed: 5,
        };
        let report = client_local_update(&mut net, &train, &update).unwrap();
        assert_eq!(report.steps, 16);
        assert_ne!(net.head.params, head_before);
        assert_ne!(net.global.params, body_before);
    }
}
