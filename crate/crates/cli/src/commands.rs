use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use persona_steer::analytics::{
    demographic_composition, top_disagreement_between_clusters, top_disagreement_vs_population,
};
use persona_steer::cf::{embed_unseen, train_cf, TrainTrace};
use persona_steer::dataset::{four_way_split, generate_synthetic, FourWaySplit, ResponseMatrix, SplitFile};
use persona_steer::error::{Error, Result};
use persona_steer::eval::{
    cluster_count_sweep, cluster_personas, comparison_markdown, demographic_personas, persona_label, reports_csv,
    run_baseline, run_steered, unseen_sweep, BaselineKind, BaselineSpec, EvaluationReport, SweepK,
};
use persona_steer::fingerprint::{chain, of_value};
use persona_steer::lm::{pretrain_toy_lm, PrefixMode, PretrainTrace};
use persona_steer::persona::{elbow_scan, kmeans, ElbowCurve, PersonaKind};
use persona_steer::spm::{train_spm, SpmTrace};
use persona_steer::{AnswerModel, ClusterModel, EmbeddingTable, SoftPromptModel};

use crate::workspace::{Workspace, DEMOGRAPHICS, QUESTIONS, RESPONSES};

const SPLIT: &str = "split.json";
const EMBEDDINGS: &str = "embeddings.json";
const CLUSTERS: &str = "clusters.json";
const ANSWER_MODEL: &str = "answer_model.json";

fn spm_file(mode: PrefixMode) -> String {
    match mode {
        PrefixMode::Prefix => "spm_prefix.json".into(),
        PrefixMode::Prompt => "spm_prompt.json".into(),
    }
}

#[derive(Serialize, Deserialize)]
struct Embeddings {
    table: EmbeddingTable,
    trace: TrainTrace,
}

#[derive(Serialize, Deserialize)]
struct Clusters {
    elbow: ElbowCurve,
    elbow_pick: Option<usize>,
    model: ClusterModel,
}

#[derive(Serialize, Deserialize)]
struct Pretrained {
    model: AnswerModel,
    trace: PretrainTrace,
}

#[derive(Serialize, Deserialize)]
struct Steering {
    spm: SoftPromptModel,
    trace: SpmTrace,
}

/// Loaded upstream state, each with the fingerprint it was checked against.
struct Stage<T> {
    value: T,
    fingerprint: String,
}

fn data(ws: &mut Workspace) -> Result<Stage<ResponseMatrix>> {
    let (value, fingerprint) = ws.dataset()?;
    Ok(Stage { value, fingerprint })
}

fn split_fingerprint(ws: &Workspace, data: &str) -> String {
    chain(&[data, &of_value(&ws.config.split)])
}

fn load_split(ws: &mut Workspace, matrix: &Stage<ResponseMatrix>) -> Result<Stage<FourWaySplit>> {
    let fingerprint = split_fingerprint(ws, &matrix.fingerprint);
    let file: SplitFile = ws.read_artifact(SPLIT, "split", &fingerprint)?;
    Ok(Stage {
        value: FourWaySplit::from_file(&file, &matrix.value)?,
        fingerprint,
    })
}

fn cf_fingerprint(ws: &Workspace, split: &str) -> String {
    chain(&[split, &of_value(&ws.config.cf)])
}

fn load_embeddings(ws: &mut Workspace, split: &Stage<FourWaySplit>) -> Result<Stage<EmbeddingTable>> {
    let fingerprint = cf_fingerprint(ws, &split.fingerprint);
    let e: Embeddings = ws.read_artifact(EMBEDDINGS, "fit-cf", &fingerprint)?;
    Ok(Stage {
        value: e.table,
        fingerprint,
    })
}

/// The chosen k is recorded in the artifact itself, so only the scan range
/// takes part in the fingerprint.
fn cluster_fingerprint(ws: &Workspace, cf: &str) -> String {
    chain(&[cf, &of_value(&ws.config.cluster.elbow_k)])
}

fn load_clusters(ws: &mut Workspace, cf: &Stage<EmbeddingTable>) -> Result<Stage<ClusterModel>> {
    let fingerprint = cluster_fingerprint(ws, &cf.fingerprint);
    let c: Clusters = ws.read_artifact(CLUSTERS, "cluster", &fingerprint)?;
    Ok(Stage {
        value: c.model,
        fingerprint,
    })
}

fn lm_fingerprint(ws: &Workspace, split: &str) -> String {
    chain(&[split, &of_value(&ws.config.lm)])
}

fn load_model(ws: &mut Workspace, split: &Stage<FourWaySplit>) -> Result<Stage<AnswerModel>> {
    let fingerprint = lm_fingerprint(ws, &split.fingerprint);
    let p: Pretrained = ws.read_artifact(ANSWER_MODEL, "pretrain-lm", &fingerprint)?;
    if !p.model.is_frozen() {
        return Err(Error::Incompatible(format!("{ANSWER_MODEL} holds an unfrozen model")));
    }
    Ok(Stage {
        value: p.model,
        fingerprint,
    })
}

fn spm_fingerprint(ws: &Workspace, cf: &str, lm: &str, mode: PrefixMode) -> String {
    let config = persona_steer::spm::SpmConfig {
        mode,
        ..ws.config.spm.clone()
    };
    chain(&[cf, lm, &of_value(&config)])
}

fn load_spm(
    ws: &mut Workspace,
    cf: &Stage<EmbeddingTable>,
    model: &Stage<AnswerModel>,
    mode: PrefixMode,
) -> Result<Stage<SoftPromptModel>> {
    let fingerprint = spm_fingerprint(ws, &cf.fingerprint, &model.fingerprint, mode);
    let s: Steering = ws.read_artifact(&spm_file(mode), "train-spm", &fingerprint)?;
    s.spm.check_compatible(&model.value)?;
    Ok(Stage {
        value: s.spm,
        fingerprint,
    })
}

pub fn gen_synthetic(ws: &mut Workspace) -> Result<()> {
    let (matrix, truth) = generate_synthetic(&ws.config.data.synthetic)?;
    let (q, r, d) = (ws.path(QUESTIONS), ws.path(RESPONSES), ws.path(DEMOGRAPHICS));
    matrix.write_files(&q, &r, &d)?;
    for name in [QUESTIONS, RESPONSES, DEMOGRAPHICS] {
        let bytes = std::fs::read(ws.path(name)).map_err(|e| Error::Io {
            path: ws.path(name),
            source: e,
        })?;
        ws.write(name, &bytes)?;
    }
    let fp = of_value(&ws.config.data.synthetic);
    ws.write_artifact("ground_truth.json", "ground-truth", &fp, &truth)?;
    println!(
        "{} individuals, {} questions, {} responses",
        matrix.individuals().len(),
        matrix.questions().len(),
        matrix.len()
    );
    Ok(())
}

pub fn split(ws: &mut Workspace) -> Result<()> {
    let matrix = data(ws)?;
    let split = four_way_split(&matrix.value, &ws.config.split)?;
    let fp = split_fingerprint(ws, &matrix.fingerprint);
    ws.write_artifact(SPLIT, "split", &fp, &split.to_file(&matrix.value))?;
    println!(
        "P_tr {} / P_val {}; R_tr^tr {}, R_tr^val {}, R_val^tr {}, R_val^val {}",
        split.p_tr.len(),
        split.p_val.len(),
        split.r_tr_tr.len(),
        split.r_tr_val.len(),
        split.r_val_tr.len(),
        split.r_val_val.len()
    );
    Ok(())
}

pub fn fit_cf(ws: &mut Workspace) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let (table, trace) = train_cf(
        &matrix.value,
        &split.value.r_tr_tr,
        Some(&split.value.r_tr_val),
        &ws.config.cf,
    )?;
    let fp = cf_fingerprint(ws, &split.fingerprint);
    println!(
        "{} epochs, training loss {:.6}, validation loss {:.6}",
        trace.epoch_losses.len(),
        trace.epoch_losses.last().copied().unwrap_or(f64::NAN),
        trace.validation_loss.unwrap_or(f64::NAN)
    );
    ws.write_artifact(EMBEDDINGS, "embeddings", &fp, &Embeddings { table, trace })
}

pub fn cluster(ws: &mut Workspace) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let cf = load_embeddings(ws, &split)?;
    let seed = ws.config.cf.seed;
    let elbow = elbow_scan(
        &cf.value,
        &matrix.value,
        &split.value.r_tr_tr,
        &ws.config.cluster.elbow_k,
        seed,
    )?;
    let elbow_pick = elbow.max_curvature_k();
    let k =
        ws.config.cluster.k.or(elbow_pick).ok_or_else(|| {
            Error::InvalidInput("no cluster count given and the elbow scan needs three k values".into())
        })?;
    let model = kmeans(&cf.value.individuals, k, seed)?;
    let pick = elbow_pick.map_or("none".to_string(), |p| p.to_string());
    println!("k = {k} (elbow pick {pick}), cluster sizes {:?}", model.sizes());
    ws.write("elbow.csv", elbow.to_csv().as_bytes())?;
    let fp = cluster_fingerprint(ws, &cf.fingerprint);
    ws.write_artifact(
        CLUSTERS,
        "clusters",
        &fp,
        &Clusters {
            elbow,
            elbow_pick,
            model,
        },
    )
}

pub fn analyze(ws: &mut Workspace) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let cf = load_embeddings(ws, &split)?;
    let clusters = load_clusters(ws, &cf)?;
    let (m, c) = (&matrix.value, &clusters.value);
    let options = ws.config.analytics.report.clone();
    let between = top_disagreement_between_clusters(m, c, &options)?;
    ws.write("analysis/between_clusters.md", between.to_markdown(m)?.as_bytes())?;
    ws.write("analysis/between_clusters.csv", between.to_csv(m)?.as_bytes())?;
    for g in 0..c.k {
        let report = top_disagreement_vs_population(m, c, g, &options)?;
        ws.write(
            &format!("analysis/cluster_{g}_vs_population.md"),
            report.to_markdown(m)?.as_bytes(),
        )?;
        ws.write(
            &format!("analysis/cluster_{g}_vs_population.csv"),
            report.to_csv(m)?.as_bytes(),
        )?;
    }
    let traits = if ws.config.analytics.traits.is_empty() {
        m.traits()
    } else {
        ws.config.analytics.traits.clone()
    };
    for t in traits {
        let table = demographic_composition(m.individuals(), c, &t)?;
        ws.write(&format!("analysis/composition_{t}.csv"), table.to_csv().as_bytes())?;
    }
    print!("{}", between.to_markdown(m)?);
    Ok(())
}

pub fn pretrain_lm(ws: &mut Workspace) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let (model, trace) = pretrain_toy_lm(&matrix.value, &split.value.r_tr_tr, &ws.config.lm)?;
    println!(
        "{} epochs, population loss {:.5}",
        trace.epoch_losses.len(),
        trace.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    let fp = lm_fingerprint(ws, &split.fingerprint);
    ws.write_artifact(ANSWER_MODEL, "answer-model", &fp, &Pretrained { model, trace })
}

pub fn train_spm_cmd(ws: &mut Workspace, mode: PrefixMode) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let cf = load_embeddings(ws, &split)?;
    let model = load_model(ws, &split)?;
    let config = persona_steer::spm::SpmConfig {
        mode,
        ..ws.config.spm.clone()
    };
    let (spm, trace) = train_spm(
        &model.value,
        &cf.value.individuals,
        &matrix.value,
        &split.value.r_tr_tr,
        &split.value.r_tr_val,
        &config,
    )?;
    match trace.best_epoch {
        Some(e) => println!(
            "{} epochs, best epoch {e}, validation loss {:.6}",
            trace.train_losses.len(),
            trace.validation_losses[e]
        ),
        None => println!("no epochs run"),
    }
    let fp = spm_fingerprint(ws, &cf.fingerprint, &model.fingerprint, mode);
    ws.write_artifact(&spm_file(mode), "soft-prompt", &fp, &Steering { spm, trace })
}

pub struct EvalRequest {
    pub baseline: Option<BaselineKind>,
    pub persona: Option<PersonaKind>,
    pub mode: PrefixMode,
    pub context_k: usize,
}

fn demographic_traits(ws: &Workspace, matrix: &ResponseMatrix) -> Vec<String> {
    if ws.config.eval.demographic_traits.is_empty() {
        matrix.traits()
    } else {
        ws.config.eval.demographic_traits.clone()
    }
}

fn steered_reports(
    ws: &mut Workspace,
    kind: PersonaKind,
    matrix: &Stage<ResponseMatrix>,
    split: &Stage<FourWaySplit>,
    cf: &Stage<EmbeddingTable>,
    model: &Stage<AnswerModel>,
    spm: &Stage<SoftPromptModel>,
) -> Result<Vec<EvaluationReport>> {
    let (m, keys) = (&matrix.value, &split.value.r_tr_val);
    let label = |name: String| format!("steered {name} ({})", mode_label(spm.value.config.mode));
    match kind {
        PersonaKind::Individual => Ok(vec![run_steered(
            &label(persona_label(kind).into()),
            &spm.value,
            &model.value,
            m,
            keys,
            &cf.value.individuals,
        )?]),
        PersonaKind::Cluster => {
            let clusters = load_clusters(ws, cf)?;
            let personas = cluster_personas(&clusters.value);
            Ok(vec![run_steered(
                &label(format!("{} k={}", persona_label(kind), clusters.value.k)),
                &spm.value,
                &model.value,
                m,
                keys,
                &personas,
            )?])
        }
        PersonaKind::Demographic => {
            let ids: BTreeSet<String> = keys.iter().map(|k| m.individual(k.individual).id.clone()).collect();
            demographic_traits(ws, m)
                .iter()
                .map(|t| {
                    let personas = demographic_personas(&cf.value.individuals, m, t, &ids)?;
                    run_steered(
                        &label(format!("{} {t}", persona_label(kind))),
                        &spm.value,
                        &model.value,
                        m,
                        keys,
                        &personas,
                    )
                })
                .collect()
        }
    }
}

fn mode_label(mode: PrefixMode) -> &'static str {
    match mode {
        PrefixMode::Prefix => "prefix",
        PrefixMode::Prompt => "prompt",
    }
}

fn slug(method: &str) -> String {
    method
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

fn write_reports(ws: &mut Workspace, reports: &[EvaluationReport]) -> Result<()> {
    for r in reports {
        let name = slug(&r.method);
        ws.write(
            &format!("reports/{name}.json"),
            format!("{}\n", r.to_json()?).as_bytes(),
        )?;
        ws.write(&format!("reports/{name}.csv"), r.per_individual_csv().as_bytes())?;
    }
    Ok(())
}

pub fn eval(ws: &mut Workspace, request: &EvalRequest) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let cf = load_embeddings(ws, &split)?;
    let model = load_model(ws, &split)?;
    let everything = request.baseline.is_none() && request.persona.is_none();
    let mut reports = Vec::new();

    let baselines: Vec<BaselineKind> = match request.baseline {
        Some(b) => vec![b],
        None if everything => vec![
            BaselineKind::RawQ,
            BaselineKind::DemographicsRawQ,
            BaselineKind::ContextRawQ,
        ],
        None => Vec::new(),
    };
    for kind in baselines {
        let spec = BaselineSpec {
            kind,
            context_k: request.context_k,
        };
        reports.push(run_baseline(
            &spec,
            &model.value,
            &matrix.value,
            &split.value,
            &cf.value.questions,
        )?);
    }

    let personas: Vec<PersonaKind> = match request.persona {
        Some(p) => vec![p],
        None if everything => vec![PersonaKind::Individual, PersonaKind::Cluster, PersonaKind::Demographic],
        None => Vec::new(),
    };
    if !personas.is_empty() {
        let spm = load_spm(ws, &cf, &model, request.mode)?;
        for kind in personas {
            reports.extend(steered_reports(ws, kind, &matrix, &split, &cf, &model, &spm)?);
        }
        if everything {
            let untrained = SoftPromptModel::new(spm.value.config.clone(), cf.value.d, &model.value)?;
            reports.push(run_steered(
                &format!("untrained soft prompt ({})", mode_label(request.mode)),
                &untrained,
                &model.value,
                &matrix.value,
                &split.value.r_tr_val,
                &cf.value.individuals,
            )?);
        }
    }
    for r in &reports {
        log::info!(
            "{}: {} individuals without the full protocol",
            r.method,
            r.fallbacks.len()
        );
    }
    write_reports(ws, &reports)?;
    if everything {
        let table = comparison_markdown(&reports);
        ws.write("reports/comparison.md", table.as_bytes())?;
        ws.write("reports/summary.csv", reports_csv(&reports).as_bytes())?;
    }
    print!("{}", comparison_markdown(&reports));
    Ok(())
}

pub fn embed_unseen_cmd(ws: &mut Workspace, k: SweepK) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let cf = load_embeddings(ws, &split)?;
    let cap = match k {
        SweepK::Count(n) => Some(n),
        SweepK::All => None,
    };
    let unseen = embed_unseen(
        &matrix.value,
        &split.value.r_val_tr,
        &cf.value.questions,
        &ws.config.cf,
        cap,
    )?;
    let fp = chain(&[&cf.fingerprint, &k.label()]);
    println!(
        "embedded {} unseen individuals from K = {}",
        unseen.vectors.len(),
        k.label()
    );
    ws.write_artifact(
        &format!("unseen_k{}.json", k.label()),
        "unseen-embeddings",
        &fp,
        &unseen.vectors,
    )
}

pub fn sweep(ws: &mut Workspace, mode: PrefixMode) -> Result<()> {
    let matrix = data(ws)?;
    let split = load_split(ws, &matrix)?;
    let cf = load_embeddings(ws, &split)?;
    let model = load_model(ws, &split)?;
    let spm = load_spm(ws, &cf, &model, mode)?;
    let unseen = unseen_sweep(
        &ws.config.eval.unseen_k,
        &spm.value,
        &model.value,
        &matrix.value,
        &split.value,
        &cf.value.questions,
        &ws.config.cf,
    )?;
    let clusters = cluster_count_sweep(
        &ws.config.cluster.sweep_k,
        &cf.value.individuals,
        &spm.value,
        &model.value,
        &matrix.value,
        &split.value.r_tr_val,
        ws.config.cf.seed,
    )?;
    ws.write("reports/sweep_unseen.csv", reports_csv(&unseen).as_bytes())?;
    ws.write("reports/sweep_unseen.md", comparison_markdown(&unseen).as_bytes())?;
    ws.write("reports/sweep_clusters.csv", reports_csv(&clusters).as_bytes())?;
    ws.write("reports/sweep_clusters.md", comparison_markdown(&clusters).as_bytes())?;
    print!("{}{}", comparison_markdown(&unseen), comparison_markdown(&clusters));
    Ok(())
}

pub fn persona_kind(s: &str) -> std::result::Result<PersonaKind, String> {
    match s {
        "individual" => Ok(PersonaKind::Individual),
        "cluster" => Ok(PersonaKind::Cluster),
        "demographic" => Ok(PersonaKind::Demographic),
        other => Err(format!(
            "unknown persona {other}; expected individual, cluster or demographic"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_slugs() {
        assert_eq!(slug("steered cluster k=3 (prefix)"), "steered_cluster_k_3_prefix");
        assert_eq!(slug("raw_q"), "raw_q");
        assert_eq!(slug("unseen K=all"), "unseen_k_all");
    }

    #[test]
    fn persona_names() {
        assert_eq!(persona_kind("cluster").unwrap(), PersonaKind::Cluster);
        assert!(persona_kind("group").is_err());
    }

    #[test]
    fn spm_files_depend_on_mode() {
        assert_ne!(spm_file(PrefixMode::Prefix), spm_file(PrefixMode::Prompt));
    }
}
