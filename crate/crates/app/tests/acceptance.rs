//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p cfsim --test acceptance`. Failures only fail the run when
//! `CFSIM_ACCEPTANCE_STRICT=1` is set.

use std::cell::OnceCell;
use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use cfsim::service::{router, ServiceState};
use cfsim_core::comparison::{
    evaluate_method, train_method, Benchmark, ComparisonSettings, Method, MethodEvaluation,
    Trained, SPLIT_RATIOS,
};
use cfsim_core::data::{read_jsonl, write_jsonl, Vocabulary};
use cfsim_core::discovery::{learn_structure, skeleton_f1, Assumptions, PriorKnowledge};
use cfsim_core::eval::{jsd, MarkovBaseline};
use cfsim_core::graph::{
    CausalGraph, Intervention, Provenance, Variable, VariableKind, VariableSet,
};
use cfsim_core::model::{
    read_checkpoint, write_checkpoint, BehaviorModel, Example, ModelConfig, Split, TrainingLog,
};
use cfsim_core::scm::ScmSpec;
use cfsim_core::simulate::{simulate_counterfactual, Components, SimulationOptions};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

const EXACT_TOL: f64 = 1e-12;
const BUDGET_1: Duration = Duration::from_secs(1);

const DSEP_GRAPHS: usize = 200;
const DSEP_MAX_NODES: usize = 8;
const DSEP_MAX_Z: usize = 3;
const BUDGET_2: Duration = Duration::from_secs(60);

const STRUCTURE_SEEDS: u64 = 20;
const STRUCTURE_N: usize = 5000;
const MIN_SKELETON_F1: f64 = 0.9;
const BUDGET_3: Duration = Duration::from_secs(120);

const GRAD_STEP: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const BUDGET_4: Duration = Duration::from_secs(60);

const TRAIN_SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 30;
const LAMBDA: f64 = 0.1;
const BUDGET_5: Duration = Duration::from_secs(15 * 60);

const ATE_TRUTH: f64 = 0.20;
const ATE_TOL: f64 = 0.08;
const MAX_CF_ERROR: f64 = 0.08;
const HOLDOUT_N: usize = 10_000;
const SERVICE_CONVERSION: (f64, f64) = (0.46, 0.62);
const BUDGET_6: Duration = Duration::from_secs(5 * 60);

const JSD_PAIRS: usize = 1000;
const SPLIT_N: usize = 1000;
const SPLIT_SIZES: (usize, usize, usize) = (700, 150, 150);

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    if elapsed < budget {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, budget {budget:?}"))
    }
}

fn shopsim_do(spec: &ScmSpec, level: &str) -> Intervention {
    Intervention::new(spec.graph(), [("F", level)]).unwrap()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let spec = ScmSpec::shopsim();
    let start = Instant::now();
    let treat = spec
        .exact_interventional(&shopsim_do(&spec, "treatment"), "Y")
        .map_err(|e| e.to_string())?[1];
    let control = spec
        .exact_interventional(&shopsim_do(&spec, "control"), "Y")
        .map_err(|e| e.to_string())?[1];
    let elapsed = start.elapsed();
    ensure!((treat - 0.54).abs() < EXACT_TOL, "P(Y=1|do(F=1)) = {treat}");
    ensure!(
        (control - 0.34).abs() < EXACT_TOL,
        "P(Y=1|do(F=0)) = {control}"
    );
    within(elapsed, BUDGET_1)?;
    Ok(format!(
        "do(F=1) {treat:.12}, do(F=0) {control:.12}, {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------- 2

fn node(i: usize) -> String {
    format!("v{i}")
}

fn random_dag(n: usize, p: f64, rng: &mut ChaCha8Rng) -> (CausalGraph, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let vars = (0..n)
        .map(|i| Variable::new(node(i), VariableKind::UserContext, ["a", "b"]).unwrap())
        .collect();
    let mut g = CausalGraph::new(vars).unwrap();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.random_bool(p) {
                g.insert_edge(&node(order[a]), &node(order[b]), Provenance::Prior)
                    .unwrap();
                edges.push((order[a], order[b]));
            }
        }
    }
    (g, edges)
}

/// Every simple trail from x to y in the skeleton.
fn trails(n: usize, adj: &[Vec<bool>], x: usize, y: usize) -> Vec<Vec<usize>> {
    fn walk(
        path: &mut Vec<usize>,
        y: usize,
        n: usize,
        adj: &[Vec<bool>],
        out: &mut Vec<Vec<usize>>,
    ) {
        let last = *path.last().unwrap();
        if last == y {
            out.push(path.clone());
            return;
        }
        for next in 0..n {
            if adj[last][next] && !path.contains(&next) {
                path.push(next);
                walk(path, y, n, adj, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(&mut vec![x], y, n, adj, &mut out);
    out
}

fn subsets_up_to(pool: &[usize], k: usize) -> Vec<BTreeSet<usize>> {
    let mut out = vec![BTreeSet::new()];
    for &p in pool {
        let grown: Vec<BTreeSet<usize>> = out
            .iter()
            .filter(|s| s.len() < k)
            .map(|s| {
                let mut s = s.clone();
                s.insert(p);
                s
            })
            .collect();
        out.extend(grown);
    }
    out
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut queries = 0usize;
    for _ in 0..DSEP_GRAPHS {
        let n = rng.random_range(2..=DSEP_MAX_NODES);
        let p = rng.random_range(0.15..0.5);
        let (g, edges) = random_dag(n, p, &mut rng);
        let mut directed = vec![vec![false; n]; n];
        for &(a, b) in &edges {
            directed[a][b] = true;
        }
        let adj: Vec<Vec<bool>> = (0..n)
            .map(|a| (0..n).map(|b| directed[a][b] || directed[b][a]).collect())
            .collect();
        let mut desc = vec![BTreeSet::new(); n];
        for (v, d) in desc.iter_mut().enumerate() {
            let mut stack = vec![v];
            while let Some(u) = stack.pop() {
                if d.insert(u) {
                    stack.extend((0..n).filter(|&w| directed[u][w]));
                }
            }
        }
        for x in 0..n {
            for y in (x + 1)..n {
                let all = trails(n, &adj, x, y);
                let pool: Vec<usize> = (0..n).filter(|&v| v != x && v != y).collect();
                for z in subsets_up_to(&pool, DSEP_MAX_Z) {
                    let active = |t: &Vec<usize>| {
                        t.windows(3).all(|w| {
                            if directed[w[0]][w[1]] && directed[w[2]][w[1]] {
                                desc[w[1]].iter().any(|d| z.contains(d))
                            } else {
                                !z.contains(&w[1])
                            }
                        })
                    };
                    let connected = all.iter().any(active);
                    let zs = VariableSet::of(&g, z.iter().map(|&v| node(v)))
                        .map_err(|e| e.to_string())?;
                    let sep = g
                        .d_separated(&node(x), &node(y), &zs)
                        .map_err(|e| e.to_string())?;
                    let rev = g
                        .d_separated(&node(y), &node(x), &zs)
                        .map_err(|e| e.to_string())?;
                    ensure!(sep == !connected && rev == sep, "edges {edges:?}: x {x} y {y} z {z:?} separated {sep}, brute force connected {connected}");
                    queries += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, BUDGET_2)?;
    Ok(format!(
        "{queries} queries over {DSEP_GRAPHS} DAGs agree, {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let spec = ScmSpec::shopsim();
    let knowledge = PriorKnowledge::from_kinds(spec.graph().variables());
    let assumptions = Assumptions {
        alpha: 0.05,
        ..Assumptions::default()
    };
    let start = Instant::now();
    let mut total = 0.0;
    for seed in 0..STRUCTURE_SEEDS {
        let d = spec
            .sample_observational(STRUCTURE_N, seed)
            .map_err(|e| e.to_string())?;
        let (g, _) = learn_structure(&d, &assumptions, d.variables(), &knowledge)
            .map_err(|e| e.to_string())?;
        total += skeleton_f1(&g, spec.graph());
    }
    let elapsed = start.elapsed();
    let mean = total / STRUCTURE_SEEDS as f64;
    ensure!(
        mean >= MIN_SKELETON_F1,
        "mean skeleton F1 {mean:.4} < {MIN_SKELETON_F1}"
    );
    within(elapsed, BUDGET_3)?;
    Ok(format!(
        "mean skeleton F1 {mean:.4} over {STRUCTURE_SEEDS} seeds, {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------- 4

fn tiny_model() -> BehaviorModel {
    let vars = vec![
        Variable::new("U", VariableKind::UserContext, ["a", "b"]).unwrap(),
        Variable::new("F", VariableKind::FeatureExposure, ["off", "on", "max"]).unwrap(),
        Variable::new("Y", VariableKind::BehavioralOutcome, ["no", "yes"]).unwrap(),
    ];
    let g = CausalGraph::new(vars)
        .unwrap()
        .add_edge("U", "F", Provenance::Prior)
        .unwrap()
        .add_edge("F", "Y", Provenance::Prior)
        .unwrap();
    let cfg = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        num_heads: 1,
        num_layers: 1,
        max_seq_len: 8,
        ..Default::default()
    };
    let mut m = BehaviorModel::new(
        cfg,
        g,
        Vocabulary::with_actions(["x", "y", "z"]).unwrap(),
        3,
    )
    .unwrap();
    let mut k = 0.0;
    for s in m.params_mut().slices_mut() {
        for x in s.iter_mut() {
            k += 1.0;
            *x += 0.05 * (k * 0.37f64).sin();
        }
    }
    m
}

fn criterion_4() -> Outcome {
    let batch = vec![
        Example {
            input: vec![0, 2, 3, 4],
            target: vec![2, 3, 4, 1],
            state: vec![0, 1, 1],
        },
        Example {
            input: vec![0, 4],
            target: vec![4, 1],
            state: vec![1, 2, 0],
        },
        Example {
            input: vec![0, 3, 3, 2, 2],
            target: vec![3, 3, 2, 2, 1],
            state: vec![1, 0, 1],
        },
    ];
    let (lambda, seed) = (0.7, 11);
    let start = Instant::now();
    let m = tiny_model();
    let (_, grads) = m
        .backward(&batch, lambda, seed)
        .map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut worst: (f64, String) = (0.0, String::new());
    for (gi, name) in m.parameter_names().iter().enumerate() {
        for j in 0..analytic[gi].len() {
            let mut plus = m.clone();
            plus.params_mut().slices_mut()[gi][j] += GRAD_STEP;
            let mut minus = m.clone();
            minus.params_mut().slices_mut()[gi][j] -= GRAD_STEP;
            let lp = plus
                .loss(&batch, lambda, seed)
                .map_err(|e| e.to_string())?
                .total;
            let lm = minus
                .loss(&batch, lambda, seed)
                .map_err(|e| e.to_string())?
                .total;
            let numeric = (lp - lm) / (2.0 * GRAD_STEP);
            let a = analytic[gi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst.0 {
                worst = (rel, name.clone());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(
        worst.0 <= GRAD_TOL,
        "worst relative error {:.3e} in {}",
        worst.0,
        worst.1
    );
    within(elapsed, BUDGET_4)?;
    Ok(format!(
        "{} parameter groups, worst relative error {:.3e}, {elapsed:.1?}",
        analytic.len(),
        worst.0
    ))
}

// ---------------------------------------------------------------- 5, 6, 7

struct SeedRun {
    seed: u64,
    bench: Benchmark,
    settings: ComparisonSettings,
    model: BehaviorModel,
    log: TrainingLog,
    train_time: Duration,
    proposed: MethodEvaluation,
    proposed_eval_time: Duration,
    no_conditioning: MethodEvaluation,
    markov: MarkovBaseline,
    markov_eval: MethodEvaluation,
}

fn run_seed(seed: u64) -> Result<SeedRun, String> {
    let mut settings = ComparisonSettings {
        seed,
        holdout_sessions: HOLDOUT_N,
        ..ComparisonSettings::default()
    };
    settings.train.epochs = EPOCHS;
    settings.train.lambda = LAMBDA;
    settings.train.seed = seed;
    let e = |e: cfsim_core::Error| e.to_string();
    let bench = Benchmark::prepare(&ScmSpec::shopsim(), &settings).map_err(e)?;

    let start = Instant::now();
    let trained = train_method(&bench, Method::Proposed, &settings).map_err(e)?;
    let train_time = start.elapsed();
    let start = Instant::now();
    let proposed = evaluate_method(&bench, Method::Proposed, &trained, &settings).map_err(e)?;
    let proposed_eval_time = start.elapsed();
    let Trained::Neural { model, log } = trained else {
        unreachable!()
    };

    let ablation = train_method(&bench, Method::AblationNoConditioning, &settings).map_err(e)?;
    let no_conditioning =
        evaluate_method(&bench, Method::AblationNoConditioning, &ablation, &settings).map_err(e)?;
    let markov_trained = train_method(&bench, Method::Markov, &settings).map_err(e)?;
    let markov_eval =
        evaluate_method(&bench, Method::Markov, &markov_trained, &settings).map_err(e)?;
    let Trained::Markov(markov) = markov_trained else {
        unreachable!()
    };
    eprintln!(
        "  seed {seed}: trained and evaluated in {:.1?}",
        train_time + proposed_eval_time
    );
    Ok(SeedRun {
        seed,
        bench,
        settings,
        model,
        log,
        train_time,
        proposed,
        proposed_eval_time,
        no_conditioning,
        markov,
        markov_eval,
    })
}

#[derive(Default)]
struct Lab {
    runs: OnceCell<Result<Vec<SeedRun>, String>>,
}

impl Lab {
    fn runs(&self) -> Result<&[SeedRun], String> {
        self.runs
            .get_or_init(|| {
                catch_unwind(|| TRAIN_SEEDS.iter().map(|&s| run_seed(s)).collect())
                    .unwrap_or_else(|_| Err("training runs panicked".to_string()))
            })
            .as_deref()
            .map_err(Clone::clone)
    }
}

fn criterion_5(lab: &Lab) -> Outcome {
    let runs = lab.runs()?;
    let mut notes = Vec::new();
    let mut elapsed = Duration::ZERO;
    for r in runs {
        let val: Vec<_> = r.log.split(Split::Validation).collect();
        let train: Vec<_> = r.log.split(Split::Train).collect();
        ensure!(
            val.len() == EPOCHS && train.len() == EPOCHS,
            "seed {}: {} epochs logged",
            r.seed,
            train.len()
        );
        let nll = val[EPOCHS - 1].seq;
        let ln_v = (r.model.vocabulary().len() as f64).ln();
        let markov = r
            .markov
            .nll(&r.bench.validation)
            .map_err(|e| e.to_string())?;
        ensure!(
            nll < ln_v.min(markov),
            "seed {}: validation seq NLL {nll:.4} vs ln V {ln_v:.4}, Markov {markov:.4}",
            r.seed
        );
        let (first, last) = (train[0].causal, train[EPOCHS - 1].causal);
        ensure!(
            last < first,
            "seed {}: L_causal {first:.5} -> {last:.5}",
            r.seed
        );
        notes.push(format!("seed {} nll {nll:.4} (ln V {ln_v:.4}, Markov {markov:.4}) L_causal {first:.4}->{last:.4}", r.seed));
        elapsed += r.train_time;
    }
    within(elapsed, BUDGET_5)?;
    Ok(format!("{}; {elapsed:.1?} total", notes.join("; ")))
}

async fn post_scenario(state: ServiceState, level: &str) -> Result<f64, String> {
    let app = router(Arc::new(state));
    let body = serde_json::json!({
        "interventions": [{"variable": "F", "level": level}],
        "num_trajectories": 2000,
        "horizon": 30,
        "temperature": 1.0,
        "seed": 0
    });
    let req = Request::post("/api/scenario")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .map_err(|e| e.to_string())?
        .to_bytes();
    if status != StatusCode::OK {
        return Err(format!(
            "service answered {status}: {}",
            String::from_utf8_lossy(&bytes)
        ));
    }
    let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    v["counterfactual"]["conversion_rate"]
        .as_f64()
        .ok_or_else(|| "no conversion_rate in response".to_string())
}

fn criterion_6(lab: &Lab) -> Outcome {
    let r = &lab.runs()?[0];
    let spec = &r.bench.spec;
    let truth = {
        let t = spec
            .exact_interventional(&shopsim_do(spec, "treatment"), "Y")
            .map_err(|e| e.to_string())?[1];
        let c = spec
            .exact_interventional(&shopsim_do(spec, "control"), "Y")
            .map_err(|e| e.to_string())?[1];
        t - c
    };
    ensure!(
        (truth - ATE_TRUTH).abs() < EXACT_TOL,
        "analytic ATE {truth}"
    );

    let start = Instant::now();
    let c = Components {
        graph: &r.bench.graph,
        model: &r.model,
        fitted: &r.bench.fitted,
        observed: &r.bench.test,
    };
    let opts = SimulationOptions {
        seed: r.seed,
        ..r.settings.simulation
    };
    let conv = |level: &str| -> Result<f64, String> {
        Ok(simulate_counterfactual(&c, &shopsim_do(spec, level), &opts)
            .map_err(|e| e.to_string())?
            .counterfactual
            .conversion_rate)
    };
    let ate = conv("treatment")? - conv("control")?;
    let elapsed = start.elapsed() + r.proposed_eval_time;
    ensure!(
        (ate - ATE_TRUTH).abs() <= ATE_TOL,
        "ATE {ate:.4} vs {ATE_TRUTH}"
    );
    for (i, holdout) in &r.bench.holdouts {
        ensure!(
            holdout.len() == HOLDOUT_N,
            "holdout for {i} has {} sessions",
            holdout.len()
        );
    }
    for ie in &r.proposed.interventions {
        ensure!(
            ie.cf_error <= MAX_CF_ERROR,
            "cf_error {:.4} for {}",
            ie.cf_error,
            ie.intervention
        );
    }
    let errors: Vec<String> = r
        .proposed
        .interventions
        .iter()
        .map(|ie| format!("{} {:.4}", ie.intervention, ie.cf_error))
        .collect();

    let state = ServiceState::new(
        r.bench.graph.clone(),
        r.bench.fitted.clone(),
        r.model.clone(),
        r.bench.test.clone(),
    )
    .map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let served = rt.block_on(post_scenario(state, "treatment"))?;
    ensure!(
        (SERVICE_CONVERSION.0..=SERVICE_CONVERSION.1).contains(&served),
        "service conversion under do(F=treatment) {served:.4} outside {SERVICE_CONVERSION:?}"
    );
    within(elapsed, BUDGET_6)?;
    Ok(format!(
        "ATE {ate:.4}, cf_error {}, service conversion {served:.4}, {elapsed:.1?}",
        errors.join(", ")
    ))
}

fn criterion_7(lab: &Lab) -> Outcome {
    let runs = lab.runs()?;
    let mut notes = Vec::new();
    for r in runs {
        let (p, a, m) = (
            &r.proposed.report,
            &r.no_conditioning.report,
            &r.markov_eval.report,
        );
        let row = format!(
            "seed {}: cf {:.4}/{:.4} consistency {:.4}/{:.4} divergence {:.4}/{:.4} nll {:.4}/{:.4} (proposed/ablation, nll vs Markov)",
            r.seed, p.cf_error, a.cf_error, p.causal_consistency, a.causal_consistency, p.divergence, a.divergence, p.seq_nll, m.seq_nll
        );
        ensure!(
            p.cf_error < a.cf_error
                && p.causal_consistency > a.causal_consistency
                && p.divergence < a.divergence
                && p.seq_nll < m.seq_nll,
            "{row}"
        );
        notes.push(row);
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draw = |k: usize| -> Vec<f64> {
        loop {
            let w: Vec<f64> = (0..k)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let s: f64 = w.iter().sum();
            if s > 0.0 {
                return w.iter().map(|x| x / s).collect();
            }
        }
    };
    for i in 0..JSD_PAIRS {
        let k = 1 + i % 10;
        let (p, q) = (draw(k), draw(k));
        let d = jsd(&p, &q);
        ensure!(
            (0.0..=ln2).contains(&d),
            "pair {i}: jsd {d} outside [0, ln 2]"
        );
        ensure!(d == jsd(&q, &p), "pair {i}: asymmetric");
        ensure!(
            jsd(&p, &p) == 0.0 && jsd(&q, &q) == 0.0,
            "pair {i}: nonzero self-divergence"
        );
    }

    let data = ScmSpec::shopsim()
        .sample_observational(SPLIT_N, 8)
        .map_err(|e| e.to_string())?;
    let (tr, va, te) = data.split(SPLIT_RATIOS, 8).map_err(|e| e.to_string())?;
    ensure!(
        (tr.len(), va.len(), te.len()) == SPLIT_SIZES,
        "split sizes {:?}",
        (tr.len(), va.len(), te.len())
    );
    let mut ids: Vec<&str> = [&tr, &va, &te]
        .iter()
        .flat_map(|d| d.sessions().iter().map(|s| s.session_id.as_str()))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ensure!(ids.len() == SPLIT_N, "splits overlap");

    let mut bytes = Vec::new();
    write_jsonl(&data, &mut bytes).map_err(|e| e.to_string())?;
    let back = read_jsonl(bytes.as_slice()).map_err(|e| e.to_string())?;
    ensure!(back == data, "JSONL round-trip changed the dataset");
    let mut again = Vec::new();
    write_jsonl(&back, &mut again).map_err(|e| e.to_string())?;
    ensure!(again == bytes, "JSONL rewrite differs");

    let model = tiny_model();
    let mut ckpt = Vec::new();
    write_checkpoint(&model, &mut ckpt).map_err(|e| e.to_string())?;
    let restored = read_checkpoint(ckpt.as_slice()).map_err(|e| e.to_string())?;
    let bits = |m: &BehaviorModel| -> Vec<u64> {
        m.params()
            .slices()
            .iter()
            .flat_map(|s| s.iter().map(|x| x.to_bits()))
            .collect()
    };
    ensure!(
        bits(&restored) == bits(&model) && restored == model,
        "checkpoint round-trip changed parameters"
    );
    let mut ckpt2 = Vec::new();
    write_checkpoint(&restored, &mut ckpt2).map_err(|e| e.to_string())?;
    ensure!(ckpt2 == ckpt, "checkpoint rewrite differs");

    Ok(format!("{JSD_PAIRS} JSD pairs, split {SPLIT_SIZES:?}, JSONL {} bytes and checkpoint {} bytes round-trip", bytes.len(), ckpt.len()))
}

// ---------------------------------------------------------------- 9

const BIN: &str = env!("CARGO_BIN_EXE_cfsim");

/// Runs one stage in `dir`; returns stdout.
fn stage(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{} failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn criterion_9() -> Outcome {
    let prior = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../core/assets/shopsim_prior.json"
    );
    let stages: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (
            vec![
                "generate-data",
                "--scm",
                "shopsim",
                "--n",
                "1500",
                "--seed",
                "9",
                "--out",
                "data.jsonl",
                "--spec-out",
                "spec.json",
            ],
            vec!["data.jsonl", "spec.json"],
        ),
        (
            vec![
                "generate-data",
                "--scm",
                "shopsim",
                "--n",
                "800",
                "--seed",
                "10",
                "--do",
                "F=treatment",
                "--out",
                "do_f.jsonl",
            ],
            vec!["do_f.jsonl"],
        ),
        (
            vec![
                "discover",
                "--data",
                "data.jsonl",
                "--prior",
                prior,
                "--interventional",
                "do_f.jsonl",
                "--out",
                "graph.json",
                "--log",
                "discover.log",
            ],
            vec!["graph.json", "discover.log"],
        ),
        (
            vec![
                "fit-scm",
                "--graph",
                "graph.json",
                "--data",
                "data.jsonl",
                "--out",
                "scm_fit.json",
            ],
            vec!["scm_fit.json"],
        ),
        (
            vec![
                "train",
                "--data",
                "data.jsonl",
                "--graph",
                "graph.json",
                "--config",
                "config.json",
                "--epochs",
                "3",
                "--seed",
                "9",
                "--out",
                "model.ckpt",
                "--log",
                "train.csv",
            ],
            vec!["model.ckpt", "train.csv"],
        ),
        (
            vec![
                "simulate",
                "--model",
                "model.ckpt",
                "--graph",
                "graph.json",
                "--scm-fit",
                "scm_fit.json",
                "--data",
                "data.jsonl",
                "--do",
                "F=treatment",
                "--n",
                "300",
                "--seed",
                "9",
            ],
            vec![],
        ),
        (
            vec![
                "evaluate",
                "--model",
                "model.ckpt",
                "--graph",
                "graph.json",
                "--benchmark",
                "shopsim",
                "--data",
                "data.jsonl",
                "--n",
                "300",
                "--holdout-n",
                "500",
                "--seed",
                "9",
                "--out",
                "eval.json",
            ],
            vec!["eval.json"],
        ),
        (
            vec![
                "evaluate",
                "--compare",
                "--settings",
                "settings.json",
                "--benchmark",
                "shopsim",
                "--out",
                "compare.json",
            ],
            vec!["compare.json"],
        ),
        (
            vec!["export-graph", "--graph", "graph.json", "--format", "dot"],
            vec![],
        ),
        (
            vec!["export-graph", "--graph", "graph.json", "--format", "json"],
            vec![],
        ),
    ];
    let config = r#"{"embed_dim": 8, "hidden_dim": 8, "num_layers": 1}"#;
    let settings = r#"{"sessions": 600, "holdout_sessions": 400, "seed": 9,
        "model": {"embed_dim": 8, "hidden_dim": 8, "num_layers": 1},
        "train": {"epochs": 1}, "simulation": {"n": 200}}"#;

    let start = Instant::now();
    let dirs = [
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    ];
    for d in &dirs {
        std::fs::write(d.path().join("config.json"), config).map_err(|e| e.to_string())?;
        std::fs::write(d.path().join("settings.json"), settings).map_err(|e| e.to_string())?;
    }
    let mut compared = 0;
    for (args, files) in &stages {
        let a = stage(dirs[0].path(), args)?;
        let b = stage(dirs[1].path(), args)?;
        ensure!(
            a == b,
            "{} printed different output on repeat",
            args.join(" ")
        );
        for f in files {
            let x = std::fs::read(dirs[0].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
            let y = std::fs::read(dirs[1].path().join(f)).map_err(|e| format!("{f}: {e}"))?;
            ensure!(
                !x.is_empty() && x == y,
                "{f} differs between runs of {}",
                args[0]
            );
            compared += 1;
        }
    }
    Ok(format!(
        "{} stages, {compared} artifacts plus stdout byte-identical, {:.1?}",
        stages.len(),
        start.elapsed()
    ))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let lab = Lab::default();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "exact interventional oracle", Box::new(criterion_1)),
        (2, "d-separation vs brute force", Box::new(criterion_2)),
        (3, "structure recovery", Box::new(criterion_3)),
        (4, "gradient check", Box::new(criterion_4)),
        (5, "training efficacy", Box::new(|| criterion_5(&lab))),
        (6, "counterfactual accuracy", Box::new(|| criterion_6(&lab))),
        (7, "method ordering", Box::new(|| criterion_7(&lab))),
        (
            8,
            "metric properties and round-trips",
            Box::new(criterion_8),
        ),
        (9, "CLI determinism", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    for (n, title, check) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {n} {title}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} {title}: {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 || std::env::var("CFSIM_ACCEPTANCE_STRICT").as_deref() != Ok("1") {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
