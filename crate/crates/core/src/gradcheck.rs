//! Finite-difference verification of the reverse-mode gradients.
//!
//! The joint loss of one fixed, pre-masked instance is treated as a scalar
//! function of the parameters. For a sample of coordinates — the
//! largest-magnitude gradient entry of every named tensor, plus random
//! extras up to the requested count — the analytic gradient is compared to a
//! central difference `(f(θ+ε) − f(θ−ε)) / 2ε` in full f64, dropout off.

use rand::Rng;
use serde::Serialize;

use crate::encoder::{EncoderGraph, ModelConfig, ModelParams};
use crate::error::Result;
use crate::pretrain::{build_loss_graph, instance_gradients, PreparedInstance};
use crate::rng::rng_for;
use crate::tokenizer::Vocab;

/// One checked coordinate.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSample {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a full gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub samples: usize,
    /// Distinct named tensors among the sampled coordinates.
    pub tensors_covered: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The worst offenders, descending by relative error (up to ten).
    pub worst: Vec<GradCheckSample>,
}

fn eval_loss(params: &ModelParams, config: &ModelConfig, prep: &PreparedInstance, v: &Vocab) -> Result<f64> {
    let mut g = EncoderGraph::new(params, config, None);
    let lg = build_loss_graph(&mut g, prep, v)?;
    Ok(g.tape.value(lg.total).item())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Compare analytic and central-difference gradients at explicit
/// `(param_id, flat_index)` coordinates.
pub fn check_coordinates(
    params: &ModelParams,
    config: &ModelConfig,
    prep: &PreparedInstance,
    v: &Vocab,
    coords: &[(usize, usize)],
    epsilon: f64,
) -> Result<Vec<GradCheckSample>> {
    let (_, grads) = instance_gradients(params, config, prep, v, None)?;
    let mut work = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &(id, flat) in coords {
        let original = work.tensor(id).data[flat];
        work.tensor_mut(id).data[flat] = original + epsilon;
        let plus = eval_loss(&work, config, prep, v)?;
        work.tensor_mut(id).data[flat] = original - epsilon;
        let minus = eval_loss(&work, config, prep, v)?;
        work.tensor_mut(id).data[flat] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.get(&id).map_or(0.0, |g| g.data[flat]);
        let cols = params.tensor(id).shape().1;
        out.push(GradCheckSample {
            tensor: params.name(id).to_string(),
            row: flat / cols,
            col: flat % cols,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(out)
}

/// Full check: every named tensor's largest-gradient coordinate, plus random
/// coordinates up to at least `min_samples` total. Deterministic per `seed`.
pub fn gradient_check(
    params: &ModelParams,
    config: &ModelConfig,
    prep: &PreparedInstance,
    v: &Vocab,
    epsilon: f64,
    tolerance: f64,
    min_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = instance_gradients(params, config, prep, v, None)?;

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for id in 0..params.len() {
        let flat = grads
            .get(&id)
            .map(|g| {
                g.data
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .unwrap_or(0);
        coords.push((id, flat));
    }

    let total_entries: usize = (0..params.len()).map(|i| params.tensor(i).len()).sum();
    let mut rng = rng_for(seed, "gradcheck", 0);
    let mut seen: std::collections::HashSet<(usize, usize)> = coords.iter().copied().collect();
    while coords.len() < min_samples {
        let mut flat_global = rng.gen_range(0..total_entries);
        let mut id = 0;
        while flat_global >= params.tensor(id).len() {
            flat_global -= params.tensor(id).len();
            id += 1;
        }
        if seen.insert((id, flat_global)) {
            coords.push((id, flat_global));
        }
    }

    let mut samples = check_coordinates(params, config, prep, v, &coords, epsilon)?;
    samples.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = samples.first().map_or(0.0, |s| s.rel_err);
    let tensors_covered = {
        let names: std::collections::HashSet<&str> = samples.iter().map(|s| s.tensor.as_str()).collect();
        names.len()
    };
    Ok(GradCheckReport {
        samples: samples.len(),
        tensors_covered,
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
        worst: samples.into_iter().take(10).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrainingInstance;
    use crate::encoder::ColumnPooling;
    use crate::linearize::Linearization;
    use crate::pretrain::prepare_instance;
    use crate::test_support::{fig1_table, fig1_utterance, fig1_vocab};

    fn toy_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            hidden_dim: 16,
            num_heads: 4,
            ffn_dim: 24,
            num_layers: 1,
            vertical_layers: 1,
            k: 2,
            max_seq_len: 128,
            linearization: Linearization::NameTypeValue,
            column_pooling: ColumnPooling::CellPool,
            dropout: 0.0,
            cvr_positions: 8,
        }
    }

    fn fig1_instance() -> TrainingInstance {
        TrainingInstance {
            id: "fig1#w0".into(),
            utterance: fig1_utterance(),
            table: fig1_table(),
            sampled_rows: vec![0, 1, 2, 3, 4],
        }
    }

    #[test]
    fn toy_config_passes_under_tolerance_with_full_coverage() {
        let v = fig1_vocab();
        let c = toy_config(v.len());
        let p = ModelParams::init(&c, 21).unwrap();
        let prep = prepare_instance(&fig1_instance(), &c, &v, 5).unwrap();
        let report = gradient_check(&p, &c, &prep, &v, 1e-5, 1e-4, 200, 17).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert!(report.samples >= 200);
        assert_eq!(report.tensors_covered, p.len(), "every named tensor sampled");
        assert!(report.max_rel_err < 1e-4);
        assert!(report.worst.len() <= 10);
        assert!(report.worst.windows(2).all(|w| w[0].rel_err >= w[1].rel_err));
    }

    #[test]
    fn untouched_embedding_rows_have_exactly_zero_gradient() {
        let v = fig1_vocab();
        let c = toy_config(v.len());
        let p = ModelParams::init(&c, 22).unwrap();
        let prep = prepare_instance(&fig1_instance(), &c, &v, 8).unwrap();
        let used: std::collections::HashSet<usize> =
            prep.masked.rows.iter().flat_map(|r| r.ids.iter().copied()).collect();
        let unused = (0..v.len()).find(|i| !used.contains(i)).unwrap();

        let id = p.id("embed.token");
        let coords: Vec<(usize, usize)> =
            (0..c.hidden_dim).map(|j| (id, unused * c.hidden_dim + j)).collect();
        let samples = check_coordinates(&p, &c, &prep, &v, &coords, 1e-5).unwrap();
        for s in samples {
            assert_eq!(s.analytic, 0.0, "unused row must have exactly zero gradient");
            assert!(s.rel_err < 1e-4);
        }
    }

    #[test]
    fn repeated_checks_with_different_seeds_pass() {
        let v = fig1_vocab();
        let c = toy_config(v.len());
        let p = ModelParams::init(&c, 23).unwrap();
        let prep = prepare_instance(&fig1_instance(), &c, &v, 3).unwrap();
        for seed in [1u64, 2] {
            let report = gradient_check(&p, &c, &prep, &v, 1e-5, 1e-4, 60, seed).unwrap();
            assert!(report.passed, "seed {seed}: max rel err {}", report.max_rel_err);
        }
    }

    #[test]
    fn single_row_path_gradients_also_verify() {
        let v = fig1_vocab();
        let mut c = toy_config(v.len());
        c.k = 1;
        c.vertical_layers = 0;
        c.column_pooling = ColumnPooling::NameTokenPool;
        let p = ModelParams::init(&c, 24).unwrap();
        let prep = prepare_instance(&fig1_instance(), &c, &v, 4).unwrap();
        let report = gradient_check(&p, &c, &prep, &v, 1e-5, 1e-4, 80, 9).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }
}
