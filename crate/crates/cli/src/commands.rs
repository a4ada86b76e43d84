use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use headprobe::analytics::{agreement_study, attention_pca, distribution_study, PoolingMode};
use headprobe::container::Container;
use headprobe::harness::{
    curves_from_records, layerwise_inactive_fraction, max_zeroed_within_tolerance, rank_by_auc,
    read_records_csv, records_to_csv, Curve, InterventionSession, Metric, RANDOM_LABEL,
};
use headprobe::{
    collect_scores, init_model, plant_heads, quantile_threshold, score_all_heads, AttentionTrace,
    ModelConfig, Scalar, ScoreFn, ScorePool, ThresholdPolicy, TransformerWeights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RUN_MODEL_NAME};
use crate::CliError;

const CORPUS_STREAM: u64 = 1;
const PROBE_STREAM: u64 = 2;

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn header(&self) -> String {
        format!("# config_sha256={} seed={}\n", self.cfg.hash, self.cfg.seed)
    }

    fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_sha256".to_string(), self.cfg.hash.clone()),
            ("seed".to_string(), self.cfg.seed.to_string()),
        ])
    }

    fn write(&self, rel: &str, contents: &str) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, contents)?;
        Ok(())
    }

    fn write_csv(&self, rel: &str, body: &str) -> Result<(), CliError> {
        self.write(rel, &format!("{}{body}", self.header()))
    }

    fn write_json<S: Serialize>(&self, rel: &str, payload: &S) -> Result<(), CliError> {
        let doc = Stamped {
            config_sha256: self.cfg.hash.clone(),
            seed: self.cfg.seed,
            payload,
        };
        self.write(rel, &(serde_json::to_string_pretty(&doc)? + "\n"))
    }

    fn read_json<D: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<D, CliError> {
        let path = self.path(rel);
        let text = fs::read_to_string(&path).map_err(|e| missing(&path, e))?;
        let doc: Stamped<D> = serde_json::from_str(&text)?;
        self.check_stamp(&path, &doc.config_sha256)?;
        Ok(doc.payload)
    }

    fn read_csv_body(&self, rel: &str) -> Result<String, CliError> {
        let path = self.path(rel);
        let text = fs::read_to_string(&path).map_err(|e| missing(&path, e))?;
        let first = text.lines().next().unwrap_or_default();
        let hash = first
            .strip_prefix("# config_sha256=")
            .and_then(|r| r.split_whitespace().next())
            .unwrap_or("");
        self.check_stamp(&path, hash)?;
        Ok(text.lines().skip(1).map(|l| format!("{l}\n")).collect())
    }

    fn load_container(&self, rel: &str) -> Result<Container, CliError> {
        let path = self.path(rel);
        let c = Container::load(&path).map_err(|e| match e {
            headprobe::Error::Io(io) => missing(&path, io),
            other => other.into(),
        })?;
        self.check_stamp(&path, c.meta("config_sha256").unwrap_or(""))?;
        Ok(c)
    }

    fn check_stamp(&self, path: &Path, hash: &str) -> Result<(), CliError> {
        if hash == self.cfg.hash {
            Ok(())
        } else {
            Err(CliError::Data(format!(
                "{} was produced by a different config ({}); rerun the earlier commands with this config",
                path.display(),
                if hash.is_empty() { "no hash" } else { hash }
            )))
        }
    }
}

fn missing(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!(
        "cannot read {}: {e} (run the earlier commands first)",
        path.display()
    ))
}

#[derive(Serialize, Deserialize)]
struct Stamped<P> {
    config_sha256: String,
    seed: u64,
    #[serde(flatten)]
    payload: P,
}

#[derive(Serialize, Deserialize)]
struct Corpus {
    sequences: Vec<Sequence>,
}

#[derive(Serialize, Deserialize)]
struct Sequence {
    id: String,
    tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct Policies {
    policies: Vec<ThresholdPolicy>,
}

#[derive(Serialize, Deserialize)]
struct Curves {
    metric: Metric,
    tolerance: f64,
    curves: Vec<Curve>,
}

fn sequence_id(i: usize) -> String {
    format!("seq_{i:04}")
}

fn trace_rel(id: &str) -> String {
    format!("traces/{id}.safetensors")
}

/// Token sequences with lengths uniform in the configured range.
fn generate_corpus(cfg: &RunConfig, model: &ModelConfig, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CORPUS_STREAM);
    let c = &cfg.corpus;
    (0..c.n_sequences)
        .map(|_| {
            let n = rng.random_range(c.min_len..=c.max_len);
            (0..n)
                .map(|_| rng.random_range(0..model.vocab_size as u32))
                .collect()
        })
        .collect()
}

/// Planted model as it will be read back from the checkpoint (f32 storage).
fn build_model<T: Scalar>(cfg: &RunConfig) -> Result<TransformerWeights<T>, CliError> {
    let mut w = init_model::<T>(cfg.model, cfg.seed)?;
    for plant in &cfg.plants {
        w = plant_heads(&w, plant)?;
    }
    let stored = w.to_container(&BTreeMap::new())?;
    Ok(TransformerWeights::from_container(&stored)?)
}

fn forward_all<T: Scalar>(
    w: &TransformerWeights<T>,
    corpus: &[Vec<u32>],
) -> Result<Vec<AttentionTrace<T>>, CliError> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, toks)| {
            Ok(w.forward(toks, None)?
                .trace
                .with_sequence_id(sequence_id(i)))
        })
        .collect()
}

pub fn simulate<T: Scalar>(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let w = build_model::<T>(cfg)?;
    let corpus = generate_corpus(cfg, &cfg.model, cfg.seed);
    let traces = forward_all(&w, &corpus)?;

    fs::create_dir_all(run.path("traces"))?;
    w.to_container(&run.meta())?
        .save(run.path("checkpoint.safetensors"))?;
    traces
        .par_iter()
        .map(|t| {
            let c = t.to_container(&run.meta())?;
            c.save(run.path(&trace_rel(t.sequence_id())))?;
            Ok(())
        })
        .collect::<Result<Vec<()>, CliError>>()?;
    let sequences = corpus
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| Sequence {
            id: sequence_id(i),
            tokens,
        })
        .collect();
    run.write_json("corpus.json", &Corpus { sequences })
}

fn load_corpus(run: &Run) -> Result<Vec<Sequence>, CliError> {
    let corpus: Corpus = run.read_json("corpus.json")?;
    Ok(corpus.sequences)
}

fn load_traces<T: Scalar>(run: &Run) -> Result<Vec<AttentionTrace<T>>, CliError> {
    let seqs = load_corpus(run)?;
    seqs.par_iter()
        .map(|s| {
            let c = run.load_container(&trace_rel(&s.id))?;
            let t: AttentionTrace<f32> = AttentionTrace::from_container(&c)?;
            if t.config() != &run.cfg.model {
                return Err(CliError::Data(format!(
                    "trace {} does not match the configured model",
                    s.id
                )));
            }
            Ok(t.cast())
        })
        .collect()
}

fn load_weights<T: Scalar>(run: &Run) -> Result<TransformerWeights<T>, CliError> {
    let c = run.load_container("checkpoint.safetensors")?;
    Ok(TransformerWeights::from_container(&c)?)
}

fn pool_rel(f: ScoreFn) -> String {
    format!("pools/{f}.csv")
}

pub fn score<T: Scalar>(run: &Run) -> Result<(), CliError> {
    let traces = load_traces::<T>(run)?;
    for &f in &run.cfg.score_fns {
        let matrices: Vec<_> = traces.par_iter().map(|t| score_all_heads(t, f)).collect();
        let mut pool = String::from("sequence,layer,head,score\n");
        for m in &matrices {
            run.write_csv(
                &format!("scores/{}_{f}.csv", m.sequence_id),
                &m.to_csv_string(),
            )?;
            for l in 0..m.n_layers {
                for h in 0..m.n_heads {
                    pool.push_str(&format!("{},{l},{h},{}\n", m.sequence_id, m.get(l, h)));
                }
            }
            for flag in &m.degenerate {
                eprintln!("note: {f} on {}: {flag:?}", m.sequence_id);
            }
        }
        run.write_csv(&pool_rel(f), &pool)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct PoolRow {
    #[allow(dead_code)]
    sequence: String,
    #[allow(dead_code)]
    layer: usize,
    #[allow(dead_code)]
    head: usize,
    score: f64,
}

fn read_pool(run: &Run, f: ScoreFn) -> Result<ScorePool, CliError> {
    let body = run.read_csv_body(&pool_rel(f))?;
    let samples = csv::Reader::from_reader(body.as_bytes())
        .deserialize::<PoolRow>()
        .map(|r| r.map(|row| row.score))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", pool_rel(f))))?;
    Ok(ScorePool::new(
        f,
        samples,
        format!("{} sequences", run.cfg.corpus.n_sequences),
    )?)
}

pub fn calibrate<T: Scalar>(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let mut policies = Vec::new();
    for &f in &cfg.score_fns {
        let pool = read_pool(run, f)?;
        for &p in &cfg.quantile_grid {
            policies.push(quantile_threshold(&pool, p)?);
        }
    }
    let traces = load_traces::<T>(run)?;
    let mut layerwise = String::from("fn,p,tau");
    for l in 0..cfg.model.n_layers {
        layerwise.push_str(&format!(",layer_{l}"));
    }
    layerwise.push('\n');
    for policy in &policies {
        let fractions = layerwise_inactive_fraction(&traces, policy)?;
        let cells: Vec<String> = fractions.iter().map(|v| v.to_string()).collect();
        layerwise.push_str(&format!(
            "{},{},{},{}\n",
            policy.score_fn,
            policy.quantile_p.unwrap_or(f64::NAN),
            policy.tau,
            cells.join(",")
        ));
    }
    run.write_json("policies.json", &Policies { policies })?;
    run.write_csv("layerwise.csv", &layerwise)
}

pub fn intervene<T: Scalar>(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let Policies { policies } = run.read_json("policies.json")?;
    let weights = load_weights::<T>(run)?;
    let corpus: Vec<Vec<u32>> = load_corpus(run)?.into_iter().map(|s| s.tokens).collect();
    let mut fns: Vec<ScoreFn> = policies.iter().map(|p| p.score_fn).collect();
    fns.sort();
    fns.dedup();
    let session = InterventionSession::new(&weights, &corpus, &fns)?;

    let mut curves = Vec::new();
    for &f in &cfg.score_fns {
        let points = policies
            .iter()
            .filter(|p| p.score_fn == f)
            .map(|p| session.evaluate_policy(p, cfg.metric))
            .collect::<Result<Vec<_>, _>>()?;
        if points.is_empty() {
            return Err(CliError::Data(format!(
                "policies.json has no policy for {f}"
            )));
        }
        curves.push(Curve::new(f.to_string(), points));
    }
    curves.push(session.random_curve(&cfg.quantile_grid, &cfg.random_seeds, cfg.metric)?);

    let records: Vec<_> = curves
        .iter()
        .flat_map(|c| c.points.iter().cloned())
        .collect();
    run.write_csv("curves.csv", &records_to_csv(&records))?;
    run.write_csv("auc_ranking.csv", &ranking_csv(&curves, cfg.metric))?;
    run.write_csv(
        "max_zeroed.csv",
        &max_zeroed_csv(&curves, cfg.metric, cfg.tolerance),
    )?;
    run.write_json(
        "curves.json",
        &Curves {
            metric: cfg.metric,
            tolerance: cfg.tolerance,
            curves,
        },
    )
}

fn ranking_csv(curves: &[Curve], metric: Metric) -> String {
    let mut out = String::from("rank,fn,normalized_auc\n");
    for (i, (label, auc)) in rank_by_auc(curves, metric.higher_is_better())
        .iter()
        .enumerate()
    {
        out.push_str(&format!("{},{label},{auc}\n", i + 1));
    }
    out
}

fn max_zeroed_csv(curves: &[Curve], metric: Metric, tolerance: f64) -> String {
    let baseline = metric.baseline();
    let mut out = String::from("fn,max_percent_zeroed,baseline,tolerance\n");
    for c in curves.iter().filter(|c| c.label != RANDOM_LABEL) {
        let m = max_zeroed_within_tolerance(c, baseline, tolerance, metric.higher_is_better());
        out.push_str(&format!("{},{m},{baseline},{tolerance}\n", c.label));
    }
    out
}

#[derive(Deserialize)]
struct ExternalSample {
    score: f64,
}

fn read_external_pool(path: &Path, f: ScoreFn, name: &str) -> Result<ScorePool, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let samples = reader
        .deserialize::<ExternalSample>()
        .map(|r| r.map(|s| s.score))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(ScorePool::new(f, samples, format!("external pool {name}"))?)
}

pub fn compare<T: Scalar>(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let cmp = &cfg.compare;
    let traces = load_traces::<T>(run)?;
    let (iou_m, prec_m) = agreement_study(&traces, &cfg.score_fns, cmp.target_fraction)?;
    run.write_csv("iou.csv", &iou_m.to_csv_string())?;
    run.write_csv("precision.csv", &prec_m.to_csv_string())?;

    let variant_traces = cmp
        .variants
        .iter()
        .map(|v| {
            let model = v.model.unwrap_or(cfg.model);
            let w = init_model::<T>(model, v.seed)?;
            forward_all(&w, &generate_corpus(cfg, &model, v.seed))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    for &f in &cfg.score_fns {
        let mut pools = vec![(RUN_MODEL_NAME.to_string(), collect_scores(&traces, f)?)];
        for (v, t) in cmp.variants.iter().zip(&variant_traces) {
            pools.push((v.name.clone(), collect_scores(t, f)?));
        }
        let pooling = if cmp.external_pools.is_empty() {
            PoolingMode::PerHeadPerSequence
        } else {
            for ext in &cmp.external_pools {
                pools.push((
                    ext.name.clone(),
                    read_external_pool(&ext.path, f, &ext.name)?,
                ));
            }
            PoolingMode::External
        };
        let m = distribution_study(&pools, f, pooling)?;
        run.write_csv(&format!("wasserstein_{f}.csv"), &m.to_csv_string())?;
    }

    let weights = load_weights::<T>(run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PROBE_STREAM);
    let probe: Vec<u32> = (0..cfg.pca_len())
        .map(|_| rng.random_range(0..cfg.model.vocab_size as u32))
        .collect();
    let probe_trace = weights.forward(&probe, None)?.trace;
    let pca = attention_pca(&[probe_trace], cmp.pca_components)?;
    let mut table = String::from("component,explained_variance_ratio\n");
    for (k, r) in pca.explained_variance_ratio.iter().enumerate() {
        table.push_str(&format!("{k},{r}\n"));
    }
    run.write_csv("pca.csv", &table)?;
    pca.to_container(&run.meta())?
        .save(run.path("pca.safetensors"))?;
    Ok(())
}

fn csv_to_markdown(body: &str) -> String {
    let mut lines = body
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty());
    let Some(head) = lines.next() else {
        return String::new();
    };
    let cols: Vec<&str> = head.split(',').collect();
    let mut out = format!("| {} |\n|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
    for l in lines {
        out.push_str(&format!(
            "| {} |\n",
            l.split(',').collect::<Vec<_>>().join(" | ")
        ));
    }
    out
}

pub fn report(run: &Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let mut md = format!(
        "<!-- config_sha256={} seed={} -->\n# Run report\n\n",
        cfg.hash, cfg.seed
    );
    md.push_str(&format!(
        "Model: {} layers × {} query heads ({} kv heads), d_model {}, precision {:?}. Corpus: {} sequences of {} to {} tokens. Plants: {}.\n\n",
        cfg.model.n_layers,
        cfg.model.n_q_heads,
        cfg.model.n_kv_heads,
        cfg.model.d_model,
        cfg.precision,
        cfg.corpus.n_sequences,
        cfg.corpus.min_len,
        cfg.corpus.max_len,
        if cfg.plants.is_empty() {
            "none".to_string()
        } else {
            cfg.plants.iter().map(|p| format!("{:?} {:?}", p.kind, p.targets)).collect::<Vec<_>>().join("; ")
        }
    ));
    let mut wass: Vec<String> = cfg
        .score_fns
        .iter()
        .map(|f| format!("wasserstein_{f}.csv"))
        .collect();
    let mut sections: Vec<(&str, String)> = vec![
        ("Normalized AUC ranking", "auc_ranking.csv".into()),
        (
            "Max % of heads zeroed within tolerance",
            "max_zeroed.csv".into(),
        ),
        ("Per-layer % flagged", "layerwise.csv".into()),
        ("IoU between score functions", "iou.csv".into()),
        ("Precision (column as reference)", "precision.csv".into()),
        ("PCA of probe attention", "pca.csv".into()),
    ];
    sections.extend(wass.drain(..).map(|f| ("Wasserstein-1 between models", f)));
    for (title, rel) in sections {
        md.push_str(&format!("## {title}\n\n"));
        if run.path(&rel).exists() {
            md.push_str(&csv_to_markdown(&run.read_csv_body(&rel)?));
        } else {
            md.push_str(&format!("`{rel}` not found.\n"));
        }
        md.push('\n');
    }

    if let Some(path) = &cfg.external_records {
        let file = fs::File::open(path).map_err(|e| missing(path, e))?;
        let records = read_records_csv(file)?;
        let groups = curves_from_records(&records);
        let mut ranking = String::from("model,metric_id,rank,fn,normalized_auc\n");
        let mut zeroed = String::from("model,metric_id,fn,max_percent_zeroed,baseline,tolerance\n");
        let mut by_model: BTreeMap<(String, String), Vec<Curve>> = BTreeMap::new();
        for ((model, _, metric), curve) in groups {
            by_model.entry((model, metric)).or_default().push(curve);
        }
        for ((model, metric), curves) in &by_model {
            let higher = metric
                .parse::<Metric>()
                .map(|m| m.higher_is_better())
                .unwrap_or(true);
            for (i, (label, auc)) in rank_by_auc(curves, higher).iter().enumerate() {
                ranking.push_str(&format!("{model},{metric},{},{label},{auc}\n", i + 1));
            }
            for c in curves.iter().filter(|c| c.label != RANDOM_LABEL) {
                // Unablated performance: the point with nothing zeroed, if present.
                let Some(base) = c
                    .points
                    .iter()
                    .find(|p| p.percent_zeroed == 0.0)
                    .map(|p| p.performance)
                else {
                    continue;
                };
                let tol = cfg.tolerance;
                let m = max_zeroed_within_tolerance(c, base, tol, higher);
                zeroed.push_str(&format!("{model},{metric},{},{m},{base},{tol}\n", c.label));
            }
        }
        run.write_csv("external_auc_ranking.csv", &ranking)?;
        run.write_csv("external_max_zeroed.csv", &zeroed)?;
        md.push_str(&format!("## Imported records ({} rows)\n\n", records.len()));
        md.push_str(&csv_to_markdown(&ranking));
        md.push('\n');
        md.push_str(&csv_to_markdown(&zeroed));
        md.push('\n');
    }
    run.write("report.md", &md)
}
