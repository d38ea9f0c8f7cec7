//! Identity and gradient verification suites.
//!
//! Each suite draws randomized cases, checks an exact identity or an
//! independent oracle (closed forms, central finite differences,
//! brute-force scans), and reports the worst deviation seen. The CLI
//! `verify` subcommand and the acceptance tests run the same suites.

use crate::error::{Error, Result};
use crate::losses::{
    ce_rows, dkd_components, dkd_loss, dkd_rows, kd_loss, kd_rows, masked_cluster_loss, BetaMode,
    DkdWeights, FrameTargets, Reduction,
};
use crate::models::{Arch, HeadKind, Model, ModelConfig};
use crate::numerics::{finite_diff_grad, softmax_t, Rng, Tape, Tensor};
use crate::speechdata::{kmeans_assign_one, kmeans_fit};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    /// Worst deviation observed, in the suite's own metric.
    pub max_gap: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_gap <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} over {} cases (max deviation {:.3e}, tolerance {:.0e})",
            if self.passed() { "pass" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_gap,
            self.tolerance
        )
    }
}

fn finish(name: &str, cases: usize, max_gap: f64, tolerance: f64) -> Result<SuiteReport> {
    let report =
        SuiteReport { name: name.to_string(), cases, max_gap, tolerance };
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::Verification(report.line()))
    }
}

const CLASS_GRID: [usize; 4] = [2, 5, 100, 500];
const TAU_GRID: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// |kd − (tckd + (1 − p_t)·nckd)| ≤ 1e-9 over randomized draws in f64.
pub fn decomposition_identity(draws: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let mut max_gap = 0.0f64;
    for i in 0..draws {
        let c = CLASS_GRID[i % CLASS_GRID.len()];
        let tau = TAU_GRID[(i / CLASS_GRID.len()) % TAU_GRID.len()];
        let teacher: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let student: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let target = rng.below(c);
        let kd = kd_loss(&teacher, &student, tau)?;
        let dc = dkd_components(&teacher, &student, target, tau)?;
        let gap = (kd - (dc.tckd + (1.0 - dc.teacher_target_prob) * dc.nckd)).abs();
        max_gap = max_gap.max(gap);
    }
    finish("decomposition identity", draws, max_gap, 1e-9)
}

/// dkd_loss(α=1, β=1−p_t) equals kd_loss within 1e-9 per sample.
pub fn dynamic_beta_equivalence(draws: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed ^ 0x7e);
    let mut max_gap = 0.0f64;
    for i in 0..draws {
        let c = CLASS_GRID[i % CLASS_GRID.len()];
        let tau = TAU_GRID[(i / CLASS_GRID.len()) % TAU_GRID.len()];
        let teacher: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let student: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let target = rng.below(c);
        let pt = dkd_components(&teacher, &student, target, tau)?.teacher_target_prob;
        let weights = DkdWeights::new(1.0, 1.0 - pt, tau)?;
        let dkd = dkd_loss(&teacher, &student, target, &weights)?;
        let kd = kd_loss(&teacher, &student, tau)?;
        max_gap = max_gap.max((dkd - kd).abs());
    }
    finish("per-sample dynamic-beta equivalence", draws, max_gap, 1e-9)
}

fn fd_rel_gap(tape_grad: &[f64], fd_grad: &[f64]) -> f64 {
    tape_grad
        .iter()
        .zip(fd_grad)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// Reverse-mode gradients of the three losses against central finite
/// differences (relative error ≤ 1e-4 with a 1e-4 absolute floor).
pub fn loss_gradient_oracle(instances_per_loss: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed ^ 0x9d);
    let mut max_gap = 0.0f64;

    for i in 0..instances_per_loss {
        let rows = 1 + rng.below(4);
        let cols = 2 + rng.below(14);
        let tau = TAU_GRID[i % TAU_GRID.len()];
        let teacher: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        let student: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        let targets: Vec<usize> = (0..rows).map(|_| rng.below(cols)).collect();
        let beta = rng.uniform(0.0, 4.0);

        // kd
        let run_kd = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let t = Tensor::new(vec![rows, cols], x.to_vec()).unwrap().with_grad();
            let sv = tape.param(&t);
            let loss = kd_rows(&mut tape, &teacher, sv, tau, Reduction::Mean).unwrap();
            let v = tape.scalar_value(loss);
            tape.backward(loss).unwrap();
            (v, tape.grad(sv).unwrap().to_vec())
        };
        let (_, g) = run_kd(&student);
        let fd = finite_diff_grad(|x| run_kd(x).0, &student, 1e-6)?;
        max_gap = max_gap.max(fd_rel_gap(&g, &fd));

        // dkd
        let run_dkd = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let t = Tensor::new(vec![rows, cols], x.to_vec()).unwrap().with_grad();
            let sv = tape.param(&t);
            let loss = dkd_rows(
                &mut tape,
                &teacher,
                sv,
                &targets,
                tau,
                1.0,
                BetaMode::Constant(beta),
                Reduction::Mean,
            )
            .unwrap();
            let v = tape.scalar_value(loss);
            tape.backward(loss).unwrap();
            (v, tape.grad(sv).unwrap().to_vec())
        };
        let (_, g) = run_dkd(&student);
        let fd = finite_diff_grad(|x| run_dkd(x).0, &student, 1e-6)?;
        max_gap = max_gap.max(fd_rel_gap(&g, &fd));

        // masked cross-entropy
        let mask: Vec<usize> = (0..rows).filter(|_| rng.next_f64() < 0.6).collect();
        if mask.is_empty() {
            continue;
        }
        let run_ce = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::<f64>::new();
            let t = Tensor::new(vec![rows, cols], x.to_vec()).unwrap().with_grad();
            let sv = tape.param(&t);
            let loss = ce_rows(&mut tape, sv, &targets, Some(&mask), Reduction::Sum).unwrap();
            let v = tape.scalar_value(loss);
            tape.backward(loss).unwrap();
            (v, tape.grad(sv).unwrap().to_vec())
        };
        let (_, g) = run_ce(&student);
        let fd = finite_diff_grad(|x| run_ce(x).0, &student, 1e-6)?;
        max_gap = max_gap.max(fd_rel_gap(&g, &fd));
    }
    finish("loss gradients vs finite differences", 3 * instances_per_loss, max_gap, 1e-4)
}

fn tiny_model_config(arch: Arch, head: HeadKind) -> ModelConfig {
    ModelConfig {
        encoder_channels: 6,
        encoder_strides: vec![5, 4, 4],
        encoder_kernels: vec![10, 4, 4],
        arch,
        num_layers: 1,
        hidden: if arch == Arch::Bilstm { 4 } else { 8 },
        ffn: 12,
        heads: 2,
        num_clusters: 4,
        head,
        head_dim: 5,
        head_temperature: 0.1,
        pos_conv_kernel: 3,
        pos_conv_groups: 1,
    }
}

/// Full forward+loss gradients of tiny models against finite differences,
/// sampled over parameter coordinates.
pub fn model_gradient_oracle(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed ^ 0x3c);
    let mut max_gap = 0.0f64;
    let configs = [
        tiny_model_config(Arch::Transformer, HeadKind::Cosine),
        tiny_model_config(Arch::Transformer, HeadKind::Linear),
        tiny_model_config(Arch::Bilstm, HeadKind::Linear),
    ];

    for i in 0..instances {
        let cfg = &configs[i % configs.len()];
        let model: Model<f64> = Model::init(cfg, &mut rng)?;
        let wave: Vec<f64> = (0..420).map(|_| rng.normal() * 0.2).collect();
        let frames = cfg.frame_count(wave.len())?;
        let labels: Vec<usize> = (0..frames).map(|_| rng.below(cfg.num_clusters)).collect();
        let teacher: Vec<f64> =
            (0..frames * cfg.num_clusters).map(|_| rng.normal()).collect();
        let mask: Vec<usize> = (0..frames).filter(|&f| f % 2 == 0).collect();

        // flatten all parameters; we will probe a sample of coordinates
        let flat: Vec<f64> = model
            .named_parameters()
            .iter()
            .flat_map(|(_, t)| t.data().iter().cloned())
            .collect();

        let eval = |params: &[f64]| -> (f64, Vec<f64>) {
            let mut m = model.clone();
            let mut off = 0;
            for t in m.parameters_mut() {
                let n = t.numel();
                t.data_mut().copy_from_slice(&params[off..off + n]);
                off += n;
            }
            let mut tape = Tape::<f64>::new();
            let fwd = m.forward_train(&mut tape, &wave, None).unwrap();
            let ce = ce_rows(&mut tape, fwd.logits, &labels, Some(&mask), Reduction::Mean).unwrap();
            let kd = kd_rows(&mut tape, &teacher, fwd.logits, 2.0, Reduction::Mean).unwrap();
            let total = tape.add_scaled(ce, kd, 1.0, 1.0);
            let v = tape.scalar_value(total);
            tape.backward(total).unwrap();
            let grad: Vec<f64> = fwd
                .param_vars
                .iter()
                .flat_map(|&pv| {
                    tape.grad(pv)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.value(pv).numel()])
                })
                .collect();
            (v, grad)
        };

        let (_, grad) = eval(&flat);
        // probe a spread of coordinates with central differences
        let probes = 14.min(flat.len());
        let mut coords: Vec<usize> = (0..probes).map(|_| rng.below(flat.len())).collect();
        coords.sort_unstable();
        coords.dedup();
        for &ci in &coords {
            let eps = 1e-5 * flat[ci].abs().max(1.0);
            let mut x = flat.clone();
            x[ci] = flat[ci] + eps;
            let hi = eval(&x).0;
            x[ci] = flat[ci] - eps;
            let lo = eval(&x).0;
            let fd = (hi - lo) / (2.0 * eps);
            let gap = (grad[ci] - fd).abs() / grad[ci].abs().max(fd.abs()).max(1e-4);
            max_gap = max_gap.max(gap);
        }
    }
    finish("model forward+loss gradients vs finite differences", instances, max_gap, 1e-4)
}

/// ∂L_KD/∂student_logit = τ·(p_s − p_t), against reverse mode, in f64.
pub fn analytic_kd_gradient(draws: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed ^ 0x11a);
    let mut max_gap = 0.0f64;
    for i in 0..draws {
        let c = 2 + rng.below(60);
        let tau = TAU_GRID[i % TAU_GRID.len()];
        let teacher: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let student: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let mut tape = Tape::<f64>::new();
        let t = Tensor::new(vec![1, c], student.clone())?.with_grad();
        let sv = tape.param(&t);
        let loss = kd_rows(&mut tape, &teacher, sv, tau, Reduction::Sum)?;
        tape.backward(loss)?;
        let grad = tape.grad(sv).unwrap();
        let pt = softmax_t(&teacher, tau)?;
        let ps = softmax_t(&student, tau)?;
        for j in 0..c {
            let analytic = tau * (ps.probs()[j] - pt.probs()[j]);
            max_gap = max_gap.max((grad[j] - analytic).abs());
        }
    }
    finish("analytic kd gradient vs reverse mode", draws, max_gap, 1e-6)
}

/// Mutating any unmasked row leaves the masked loss bit-identical.
pub fn masked_locality(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed ^ 0x10c);
    let mut checked = 0usize;
    for _ in 0..cases {
        let t = 2 + rng.below(12);
        let c = 2 + rng.below(10);
        let data: Vec<f64> = (0..t * c).map(|_| rng.normal()).collect();
        let labels: Vec<usize> = (0..t).map(|_| rng.below(c)).collect();
        let mut mask: Vec<usize> = (0..t).filter(|_| rng.next_f64() < 0.5).collect();
        if mask.len() == t {
            mask.pop();
        }
        let unmasked: Vec<usize> = (0..t).filter(|i| !mask.contains(i)).collect();
        let logits = Tensor::new(vec![t, c], data.clone())?;
        let targets = FrameTargets::new(labels, mask)?;
        let a = masked_cluster_loss(&logits, &targets, Reduction::Sum)?.value;

        let victim = unmasked[rng.below(unmasked.len())];
        let mut mutated = data;
        for v in mutated[victim * c..(victim + 1) * c].iter_mut() {
            *v = rng.normal() * 50.0;
        }
        let b = masked_cluster_loss(&Tensor::new(vec![t, c], mutated)?, &targets, Reduction::Sum)?
            .value;
        if a.to_bits() != b.to_bits() {
            return Err(Error::Verification(format!(
                "masked loss changed when an unmasked row was mutated: {a} vs {b}"
            )));
        }
        checked += 1;
    }
    finish("masked-loss locality (bit-exact)", checked, 0.0, 0.0)
}

/// k-means: inertia monotonicity over random datasets plus brute-force
/// assignment agreement.
pub fn kmeans_checks(datasets: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed ^ 0x6b);
    for case in 0..datasets {
        let n = 15 + rng.below(60);
        let d = 1 + rng.below(4);
        let k = 1 + rng.below(5.min(n));
        let pts: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.normal() * 2.0).collect()).collect();
        let fit = kmeans_fit(&pts, k, 20, case as u64)?;
        for w in fit.inertia_per_iter.windows(2) {
            if w[1] > w[0] + 1e-9 {
                return Err(Error::Verification(format!(
                    "inertia increased: {:?}",
                    fit.inertia_per_iter
                )));
            }
        }
        for x in &pts {
            let got = kmeans_assign_one(x, &fit.centroids);
            let brute = (0..fit.centroids.len())
                .map(|i| {
                    let d2: f64 = x
                        .iter()
                        .zip(&fit.centroids[i])
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum();
                    (d2, i)
                })
                .min_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)))
                .unwrap()
                .1;
            if got != brute {
                return Err(Error::Verification(format!(
                    "assignment {got} disagrees with brute force {brute}"
                )));
            }
        }
    }
    finish("k-means monotonicity and assignment oracle", datasets, 0.0, 0.0)
}

/// Runs every suite at the acceptance sizes.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        decomposition_identity(1000, seed)?,
        dynamic_beta_equivalence(1000, seed)?,
        loss_gradient_oracle(50, seed)?,
        model_gradient_oracle(50, seed)?,
        analytic_kd_gradient(200, seed)?,
        masked_locality(100, seed)?,
        kmeans_checks(100, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_at_reduced_sizes() {
        decomposition_identity(64, 1).unwrap();
        dynamic_beta_equivalence(64, 1).unwrap();
        loss_gradient_oracle(6, 1).unwrap();
        model_gradient_oracle(3, 1).unwrap();
        analytic_kd_gradient(20, 1).unwrap();
        masked_locality(20, 1).unwrap();
        kmeans_checks(10, 1).unwrap();
    }

    #[test]
    fn report_lines_are_informative() {
        let rep = decomposition_identity(16, 2).unwrap();
        let line = rep.line();
        assert!(line.starts_with("pass: decomposition identity"));
        assert!(line.contains("16 cases"));
    }
}
