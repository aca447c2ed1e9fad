use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode, Stdio};

use anyhow::{anyhow, bail, Context, Result};
use binderdiff::autodiff::GradFault;
use binderdiff::checkpoint::{Checkpoint, MANIFEST};
use binderdiff::curation::{
    self, curate_entry, make_pseudo_complex, parse_cluster_file, parse_structure, split_by_cluster, Rejection,
};
use binderdiff::metrics::{
    parse_comparative, parse_scorer_output, plddt_order, summarize, synthetic_score, ScoreRecord, SuccessThresholds,
    TargetEval, TopKSummary,
};
use binderdiff::record::{read_records, save_records, write_records, ComplexRecord};
use binderdiff::sampling::{candidate_id, CandidateMeta, Sampler};
use binderdiff::schedules::Schedules;
use binderdiff::selfcheck;
use binderdiff::training::{parse_metrics_log, smoothed_loss_ends, train_loop, StepMetrics};
use binderdiff::Error;
use clap::CommandFactory;
use rayon::prelude::*;

use crate::config::{GuidanceSection, RunConfig};
use crate::{Cli, CurateArgs, EvalArgs, Fault, InspectArgs, OnOff, SampleArgs, SelfcheckArgs, TrainArgs};

pub const COMPLEXES_FILE: &str = "complexes.txt";
pub const REJECTIONS_FILE: &str = "rejections.tsv";
/// Steps averaged at each end of a metrics log when reporting loss change.
pub const LOSS_WINDOW: usize = 100;

fn parse_list<T: std::str::FromStr>(s: &str, n: usize, what: &str) -> Result<Vec<T>> {
    let v: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow!("bad {what} {s:?}")))
        .collect::<Result<_>>()?;
    if v.len() != n {
        bail!("{what} needs {n} comma-separated values, got {s:?}");
    }
    Ok(v)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn curate(a: &CurateArgs) -> Result<ExitCode> {
    let (complexes, rejections, entries, pseudo) = match (a.toy, &a.input) {
        (Some(count), _) => {
            let lengths = parse_list::<usize>(&a.toy_lengths, 2, "toy length range")?;
            (curation::synth_toy_dataset(count, (lengths[0], lengths[1]), a.seed)?, Vec::new(), 0, 0)
        }
        (None, Some(dir)) => curate_dir(dir, a.pseudo)?,
        (None, None) => bail!("either --input or --toy is required"),
    };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    save_records(&a.out_dir.join(COMPLEXES_FILE), &complexes)?;
    let mut log = String::new();
    for r in &rejections {
        let _ = writeln!(log, "{r}");
    }
    write_file(&a.out_dir.join(REJECTIONS_FILE), &log)?;
    if let Some(path) = &a.clusters {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ratios = parse_list::<f64>(&a.ratios, 3, "split ratios")?;
        let split = split_by_cluster(&complexes, &parse_cluster_file(&text)?, [ratios[0], ratios[1], ratios[2]], a.seed)?;
        for (name, recs) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
            save_records(&a.out_dir.join(format!("{name}.txt")), recs)?;
        }
        println!("split: train {} valid {} test {}", split.train.len(), split.valid.len(), split.test.len());
    }
    println!("entries {entries} complexes {} pseudo {pseudo} rejections {}", complexes.len(), rejections.len());
    Ok(ExitCode::SUCCESS)
}

fn curate_dir(dir: &Path, pseudo: bool) -> Result<(Vec<ComplexRecord>, Vec<Rejection>, usize, usize)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading directory {}", dir.display()))?;
    files.retain(|p| p.is_file());
    files.sort();
    if files.is_empty() {
        eprintln!("binderdiff: warning: no structure files in {}", dir.display());
    }
    let results: Vec<Result<(Vec<ComplexRecord>, Vec<Rejection>, usize)>> = files
        .par_iter()
        .map(|path| {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let entry = parse_structure(&text, &id).with_context(|| format!("parsing {}", path.display()))?;
            let mut cur = curate_entry(&entry);
            let mut made = 0;
            if pseudo {
                let (kept, _) = curation::apply_quality_filters(&entry);
                if let [only] = kept.as_slice() {
                    if let Some(rec) = make_pseudo_complex(&entry.id, only) {
                        cur.complexes.push(rec);
                        made += 1;
                    }
                }
            }
            Ok((cur.complexes, cur.rejections, made))
        })
        .collect();
    let (mut complexes, mut rejections, mut made) = (Vec::new(), Vec::new(), 0);
    for r in results {
        let (c, rj, m) = r?;
        complexes.extend(c);
        rejections.extend(rj);
        made += m;
    }
    Ok((complexes, rejections, files.len(), made))
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    if a.dump_defaults {
        print!("{}", RunConfig::default().to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let mut cfg = match (&a.config, a.toy) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::toy(0),
        (None, false) => {
            let mut cmd = Cli::command();
            let sub = cmd.find_subcommand_mut("train").expect("train subcommand");
            sub.error(clap::error::ErrorKind::MissingRequiredArgument, "one of --config or --toy is required").exit();
        }
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
        cfg.train.warmup = cfg.train.warmup.min(steps);
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    let data = match (a.toy, a.data.as_ref().or(cfg.paths.data.as_ref())) {
        (true, _) => curation::toy_corpus(cfg.seed)?.0,
        (false, Some(p)) => read_records(p)?,
        (false, None) => bail!("no training data: set paths.data or pass --data"),
    };
    let out = a.out.clone().or_else(|| cfg.paths.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
    let outcome = train_loop::<f32>(&data, cfg.denoiser.clone(), cfg.diffusion, cfg.train.clone(), &out, a.resume.as_deref())?;
    let text = fs::read_to_string(&outcome.metrics_log)?;
    let rows = parse_metrics_log(&text)?;
    let last = rows.last().map_or(f64::NAN, |m: &StepMetrics| m.total);
    println!(
        "seed {} step {} total {last:.4} checkpoint {}",
        cfg.seed,
        outcome.final_step,
        outcome.checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn sample(a: &SampleArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::<f32>::load(&a.checkpoint).context("loading checkpoint")?;
    let defaults = GuidanceSection::default();
    let section = GuidanceSection {
        k_guid: a.k_guid.unwrap_or(defaults.k_guid),
        n_init: a.n_init.unwrap_or(defaults.n_init),
        structure: a.guidance == OnOff::On,
        fragments: if a.guidance == OnOff::On { a.fragments.clone() } else { None },
    };
    let guidance = section.build(ckpt.mu_knn)?;
    let schedules = Schedules::<f32>::build(&ckpt.diffusion, ckpt.model.config().steps)?;
    let targets = read_records(&a.targets)?;
    if a.num == 0 {
        bail!("--num must be at least 1");
    }
    let sampler = Sampler { model: &ckpt.model, schedules: &schedules, guidance: &guidance, s_norm: ckpt.s_norm };
    let jobs: Vec<(usize, usize)> = (0..targets.len()).flat_map(|t| (0..a.num).map(move |i| (t, i))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(t, i)| {
            let rec = &targets[t];
            let n = a.length.unwrap_or(rec.binder.len());
            let seed = a.seed + (t * a.num + i) as u64;
            sampler.generate(&candidate_id(&rec.id, i), &rec.target, n, seed)
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut meta = format!("{}\n", CandidateMeta::HEADER);
    for r in results {
        let c = r?;
        let _ = writeln!(meta, "{}", c.meta.to_line());
        records.push(c.record);
    }
    write_file(&a.out, &write_records(&records))?;
    let meta_path = meta_path(&a.out);
    write_file(&meta_path, &meta)?;
    println!("candidates {} seed {} out {} meta {}", records.len(), a.seed, a.out.display(), meta_path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.tsv");
    PathBuf::from(s)
}

fn target_of(candidate: &str) -> Result<&str> {
    candidate
        .rsplit_once('#')
        .map(|(t, _)| t)
        .ok_or_else(|| anyhow!("candidate id {candidate} lacks a `#` target suffix"))
}

fn run_scorer(cmd: &str, rec: &ComplexRecord) -> Result<ScoreRecord> {
    let mut child = Process::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .with_context(|| format!("starting scorer {cmd:?}"))?;
    child
        .stdin
        .take()
        .expect("piped stdin")
        .write_all(write_records(std::slice::from_ref(rec)).as_bytes())
        .with_context(|| format!("feeding scorer for {}", rec.id))?;
    let out = child.wait_with_output()?;
    if !out.status.success() {
        bail!("scorer failed on {} ({})", rec.id, out.status);
    }
    Ok(parse_scorer_output(&rec.id, &String::from_utf8_lossy(&out.stdout)).with_context(|| format!("scorer output for {}", rec.id))?)
}

fn fmt_cell(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "—".to_string(), |v| format!("{v:.prec$}"))
}

pub fn render_table(rows: &[TopKSummary]) -> String {
    let comparative = rows.iter().any(|r| r.comparative.is_some());
    let mut out = String::from("top-k\tipTM\tpTM\tPAE\tpLDDT\tSR\tdiversity\tnovelty");
    if comparative {
        out.push_str("\tcomparative-SR");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "top-{}\t{:.3}\t{:.3}\t{:.2}\t{:.2}\t{:.3}\t{}\t{:.3}",
            r.k,
            r.iptm,
            r.ptm,
            r.pae,
            r.plddt,
            r.success,
            fmt_cell(r.diversity, 3),
            r.novelty
        );
        if comparative {
            let _ = write!(out, "\t{}", fmt_cell(r.comparative, 3));
        }
        out.push('\n');
    }
    out
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let candidates = read_records(&a.candidates)?;
    let references: HashMap<String, ComplexRecord> =
        read_records(&a.references)?.into_iter().map(|r| (r.id.clone(), r)).collect();
    let scores: Vec<ScoreRecord> = if let Some(path) = &a.scores {
        let mut by_id: HashMap<String, ScoreRecord> =
            binderdiff::metrics::load_scores(path)?.into_iter().map(|s| (s.id.clone(), s)).collect();
        let out = candidates
            .iter()
            .map(|c| by_id.remove(&c.id).ok_or_else(|| anyhow!("no score for candidate {}", c.id)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = by_id.keys().min() {
            bail!("score for unknown candidate {extra}");
        }
        out
    } else if let Some(cmd) = &a.scorer_cmd {
        candidates.iter().map(|c| run_scorer(cmd, c)).collect::<Result<_>>()?
    } else if a.synthetic_scorer {
        candidates.iter().map(synthetic_score).collect()
    } else {
        bail!("one of --scores, --scorer-cmd or --synthetic-scorer is required");
    };
    let comparative: Option<HashMap<String, f64>> = match &a.comparative {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(parse_comparative(&text)?.into_iter().collect())
        }
        None => None,
    };

    let mut groups: BTreeMap<String, Vec<(ScoreRecord, String)>> = BTreeMap::new();
    for (c, s) in candidates.iter().zip(scores) {
        groups.entry(target_of(&c.id)?.to_string()).or_default().push((s, c.binder.sequence.clone()));
    }
    let mut evals = Vec::with_capacity(groups.len());
    for (target, mut members) in groups {
        let reference = references.get(&target).ok_or_else(|| anyhow!("no reference complex for target {target}"))?;
        members.sort_by(|x, y| plddt_order(&x.0, &y.0));
        let comp = match &comparative {
            Some(map) => {
                let get = |id: &str| map.get(id).copied().ok_or_else(|| anyhow!("no comparative score for {id}"));
                let per = members.iter().map(|(s, _)| get(&s.id)).collect::<Result<Vec<_>>>()?;
                Some((get(&target)?, per))
            }
            None => None,
        };
        let (ranked, sequences) = members.into_iter().unzip();
        evals.push(TargetEval { target, reference_binder: reference.binder.sequence.clone(), ranked, sequences, comparative: comp });
    }
    if evals.is_empty() {
        bail!("no candidates to evaluate");
    }
    let fewest = evals.iter().map(|e| e.ranked.len()).min().unwrap_or(0);
    let th = SuccessThresholds::default();
    let mut rows = Vec::new();
    for &k in &a.k {
        if k == 0 || k > fewest {
            eprintln!("binderdiff: warning: skipping top-{k}; some target has only {fewest} candidates");
            continue;
        }
        rows.push(summarize(&evals, k, &th)?);
    }
    println!("targets {} candidates {}", evals.len(), candidates.len());
    print!("{}", render_table(&rows));
    Ok(ExitCode::SUCCESS)
}

pub fn inspect(a: &InspectArgs) -> Result<ExitCode> {
    let p = &a.path;
    if p.is_dir() {
        if !p.join(MANIFEST).exists() {
            bail!("{} is a directory without {MANIFEST}", p.display());
        }
        let m = Checkpoint::<f32>::read_manifest(p)?;
        let params: usize = m.tensors.iter().map(|t| t.rows * t.cols).sum();
        println!("checkpoint {}", p.display());
        println!("step {} seed {} optimizer {}", m.step, m.seed, m.has_optimizer);
        println!("alphabet {} hash {}", m.alphabet, m.alphabet_hash);
        println!("tensors {} parameters {params}", m.tensors.len());
        println!("s_norm {} mu_knn {}", m.s_norm, m.mu_knn);
        print!("{}", toml::to_string(&m.denoiser)?);
        return Ok(ExitCode::SUCCESS);
    }
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    if text.starts_with("step\t") {
        let rows = parse_metrics_log(&text)?;
        println!("metrics log {} steps {}", p.display(), rows.len());
        if let Ok((first, last)) = smoothed_loss_ends(&rows, LOSS_WINDOW.min(rows.len())) {
            println!("smoothed total: first {first:.4} last {last:.4} ratio {:.3}", last / first);
        }
        return Ok(ExitCode::SUCCESS);
    }
    let recs = binderdiff::record::parse_records(&text)?;
    let span = |f: &dyn Fn(&ComplexRecord) -> usize| {
        let v: Vec<usize> = recs.iter().map(f).collect();
        (v.iter().min().copied().unwrap_or(0), v.iter().max().copied().unwrap_or(0))
    };
    let (tl, th) = span(&|r| r.target.len());
    let (bl, bh) = span(&|r| r.binder.len());
    println!("records {} target length {tl}-{th} binder length {bl}-{bh}", recs.len());
    Ok(ExitCode::SUCCESS)
}

pub fn selfcheck(a: &SelfcheckArgs) -> Result<ExitCode> {
    let fault = match a.inject_fault {
        Some(Fault::FxSign) => GradFault::FlipCoordWeightSign,
        None => GradFault::None,
    };
    let results = selfcheck::run_all(a.quick, fault).map_err(|e: Error| anyhow!(e))?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{}\t{}\tmeasured {:.3e}\ttolerance {:.1e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.tolerance
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        eprintln!("binderdiff: error: {failed} of {} checks failed", results.len());
        return Ok(ExitCode::FAILURE);
    }
    println!("all {} checks passed", results.len());
    Ok(ExitCode::SUCCESS)
}
