//! `clab`: data generation, base training, adaptation, scoring, Fisher
//! analysis and the full reproduction pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use clab_core::adapters::Method;
use clab_core::checkpoint;
use clab_core::continual::{estimate_fisher, overlap_csv, overlap_matrix, EwcConfig};
use clab_core::experiments::{
    adapt_config, affinity_ranking, incomplete_runs, old_dev_sets, reproduce, resolve_code, resolve_init,
    train_base, write_tables, CodeChoice, DataSet, ExperimentManifest, FisherNorm, InitChoice, Results,
};
use clab_core::metrics::{corpus_score, Unit};
use clab_core::synthdata::{read_roster, Split};
use clab_core::training::{evaluate, select_lambda, train, write_run_dir, DevSet, LambdaCriterion};

#[derive(Parser)]
#[command(name = "clab", version, about = "Continual language adaptation lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment manifest (JSON); the built-in default when omitted.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long, global = true, env = "CLAB_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective manifest as JSON.
    Manifest,
    /// Generate train/dev/test corpora for every language of a roster.
    GenData {
        /// Roster file: JSON array of language specs. Defaults to the manifest roster.
        #[arg(long)]
        roster: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base model on the manifest's base languages.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Estimate a diagonal Fisher for one language.
    Fisher {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a base model to a language.
    Adapt(AdaptArgs),
    /// Score a model (optionally with an adapter) on corpora.
    Eval(EvalArgs),
    /// Pairwise Fisher overlap matrix.
    Overlap {
        #[arg(required = true, num_args = 2..)]
        fishers: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render tables and report.md of a reproduce directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Run every experiment and write data, runs, tables and report.md.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Target language id.
    #[arg(long)]
    lang: String,
    /// ft, lora, spt or slct.
    #[arg(long)]
    method: Method,
    /// native, auto, or a code token. Default: native for ft, auto for
    /// lora/spt, <L7> for slct.
    #[arg(long)]
    code: Option<CodeChoice>,
    /// SLCT row initialization: surrogate:auto, surrogate:<Lk> or mean.
    #[arg(long)]
    init: Option<InitChoice>,
    #[arg(long)]
    ewc_fisher: Option<PathBuf>,
    /// EWC strength; selected on the dev sets from the grid when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Absolute initial learning rate, overriding the manifest scale.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Languages the adapter is attached for; default all evaluated ones.
    #[arg(long, value_delimiter = ',')]
    adapter_langs: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    langs: Vec<String>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Per-language code override, LANG=CODE.
    #[arg(long = "code")]
    codes: Vec<String>,
    /// char, word or both.
    #[arg(long, default_value = "both")]
    unit: String,
    /// Label for the model column.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one hypothesis file per language.
    #[arg(long)]
    hyp_dir: Option<PathBuf>,
}

fn load_manifest(common: &Common) -> Result<ExperimentManifest> {
    let mut m = match &common.manifest {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentManifest::from_json(&text)?
        }
        None => ExperimentManifest::default(),
    };
    if let Some(s) = common.seed {
        m.seed = s;
    }
    m.validate()?;
    Ok(m)
}

fn write_new(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(m: &mut ExperimentManifest, roster: Option<&Path>, out: &Path) -> Result<()> {
    if let Some(p) = roster {
        m.roster = read_roster(p)?;
    }
    let data = DataSet::generate(m)?;
    data.write(out)?;
    println!("wrote {} corpora to {}", data.corpora.len(), out.display());
    Ok(())
}

fn cmd_train_base(m: &mut ExperimentManifest, data_dir: &Path, out: &Path, epochs: Option<usize>, lr: Option<f64>) -> Result<()> {
    if let Some(e) = epochs {
        m.base_training.epochs = e;
    }
    if let Some(lr) = lr {
        m.base_training.lr = lr;
    }
    m.validate()?;
    let data = DataSet::load(data_dir, &m.synth)?;
    let outcome = train_base(m, &data)?;
    let summary = write_run_dir(out, "base", &m.model, &m.base_train_config(), &outcome)?;
    for d in &summary.final_dev {
        println!("{} dev CER {:.4} WER {:.4}", d.lang, d.cer, d.wer);
    }
    Ok(())
}

fn cmd_fisher(m: &ExperimentManifest, model: &Path, data_dir: &Path, lang: &str, split: Split, cap: Option<usize>, out: &Path) -> Result<()> {
    let (config, params) = checkpoint::load_model(model)?;
    let data = DataSet::load(data_dir, &m.synth)?;
    let code = data.language(lang)?.code().to_string();
    let ex = data.eval_set(lang, split)?.examples(&config, &code)?;
    let f = estimate_fisher(&config, &params, &ex, cap.unwrap_or(m.fisher.cap), lang)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save_fisher(out, &f)?;
    println!("{lang}: {} utterances, trace {:e}", f.sample_count, f.trace());
    Ok(())
}

fn cmd_adapt(m: &ExperimentManifest, a: &AdaptArgs) -> Result<()> {
    if a.ewc_fisher.is_some() && a.method != Method::FullFt {
        return Err(clab_core::Error::ConfigConflict(format!("--ewc-fisher requires --method ft, got {}", a.method)).into());
    }
    if a.lambda.is_some() && a.ewc_fisher.is_none() {
        return Err(clab_core::Error::ConfigConflict("--lambda requires --ewc-fisher".into()).into());
    }
    if a.init.is_some() && a.method != Method::Slct {
        return Err(clab_core::Error::ConfigConflict("--init applies to --method slct only".into()).into());
    }
    let (config, base) = checkpoint::load_model(&a.base)?;
    let data = DataSet::load(&a.data, &m.synth)?;
    let target = data.language(&a.lang)?;
    let candidates: Vec<String> = m.base_languages.iter().filter(|l| **l != a.lang).cloned().collect();
    let ranking = affinity_ranking(&data, &a.lang, &candidates, m.affinity)?;
    let choice = a.code.clone().unwrap_or(match a.method {
        Method::FullFt => CodeChoice::Native,
        Method::Slct => CodeChoice::Fixed("<L7>".into()),
        _ => CodeChoice::Auto,
    });
    let code = resolve_code(&choice, target, &ranking)?;
    let init = match a.method {
        Method::Slct => Some(resolve_init(
            a.init.as_ref().unwrap_or(&InitChoice::Surrogate(CodeChoice::Auto)),
            target,
            &ranking,
        )?),
        _ => None,
    };
    let mut settings = m.adaptation.clone();
    if let Some(r) = a.rank {
        settings.lora_rank = r;
    }
    if let Some(p) = a.prompts {
        settings.prompt_count = p;
    }
    if let Some(e) = a.epochs {
        settings.epochs = e;
    }
    let mut cfg = adapt_config(&settings, a.method, m.seed, &code, init);
    if let Some(lr) = a.lr {
        cfg.lr_initial = lr;
    }
    cfg.validate()?;
    let train_ex = data.eval_set(&a.lang, Split::Train)?.examples(&config, &code)?;
    let dev = vec![DevSet {
        set: data.eval_set(&a.lang, Split::Dev)?,
        code: code.clone(),
    }];

    let mut lambda_used = None;
    let outcome = match &a.ewc_fisher {
        None => {
            let mut c = cfg.clone();
            c.dev_eval_every = 1;
            train(&config, &base, &train_ex, &dev, &c, None)?
        }
        Some(fpath) => {
            let fisher = FisherNorm::apply(m.ewc.normalization, &checkpoint::load_fisher(fpath)?)?;
            match a.lambda {
                Some(lambda) => {
                    lambda_used = Some(lambda);
                    let ewc = EwcConfig::new(lambda, base.clone(), fisher)?;
                    train(&config, &base, &train_ex, &dev, &cfg, Some(&ewc))?
                }
                None => {
                    let (dev_old, old_baseline) = old_dev_sets(&config, &data, &candidates, &base)?;
                    let mut lcfg = cfg.clone();
                    lcfg.lambda_grid = m.ewc.lambda_grid.clone();
                    let sel = select_lambda(&config, &base, &train_ex, &dev[0], &dev_old, &old_baseline, &lcfg, &fisher, m.ewc.criterion)?;
                    for r in &sel.rows {
                        println!(
                            "lambda {:e}: dev CER new {:.4}, mean regression {:.4}, objective {:.4}",
                            r.lambda, r.dev_cer_new, r.mean_regression, r.objective
                        );
                    }
                    lambda_used = Some(sel.lambda_star);
                    let idx = sel.rows.iter().position(|r| r.lambda == sel.lambda_star).expect("grid member");
                    sel.runs.into_iter().nth(idx).expect("one run per lambda")
                }
            }
        }
    };
    let name = a.out.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "adapt".into());
    let summary = write_run_dir(&a.out, &name, &config, &cfg, &outcome)?;
    let meta = serde_json::json!({
        "method": a.method,
        "lang": a.lang,
        "code": code,
        "lambda": lambda_used,
        "criterion": if lambda_used.is_some() && a.lambda.is_none() { Some(m.ewc.criterion) } else { None::<LambdaCriterion> },
        "base_hash": base.content_hash(),
    });
    write_new(&a.out.join("job.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    let (params, adapter) = outcome.decoder(&base);
    let e = evaluate(&config, params, adapter, &dev[0].set, &code)?;
    println!("{} on {} dev under {code}: CER {:.4} WER {:.4}", a.method, a.lang, e.cer.rate, e.wer.rate);
    if let Some(l) = lambda_used {
        println!("lambda {l:e}");
    }
    println!("artifact hash {}", summary.artifact_hash);
    Ok(())
}

/// File stem, or the run directory's name for `runs/<name>/artifact.bin`.
fn model_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) if stem == "artifact" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

fn cmd_eval(m: &ExperimentManifest, a: &EvalArgs) -> Result<()> {
    let units: Vec<Unit> = match a.unit.as_str() {
        "both" => vec![Unit::Char, Unit::Word],
        u => vec![u.parse()?],
    };
    let (config, params) = checkpoint::load_model(&a.model)?;
    let adapter = a.adapter.as_ref().map(|p| checkpoint::load_adapter(p, &config)).transpose()?;
    let roster = read_roster(&a.data.join("roster.json"))?;
    let missing: Vec<String> = a
        .langs
        .iter()
        .map(|l| a.data.join(clab_core::experiments::corpus_file_name(l, a.split)))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!(clab_core::Error::Data(format!("missing corpora: {}", missing.join(", "))));
    }
    let data = DataSet::load(&a.data, &m.synth)?;
    let mut overrides = std::collections::BTreeMap::new();
    for c in &a.codes {
        let (lang, code) = c.split_once('=').with_context(|| format!("--code expects LANG=CODE, got `{c}`"))?;
        overrides.insert(lang.to_string(), code.to_string());
    }
    let name = a.name.clone().unwrap_or_else(|| model_label(&a.model));
    let mut csv = String::from("model,lang,split,code,unit,S,I,D,ref_len,rate\n");
    for lang in &a.langs {
        let spec = roster.iter().find(|s| s.id == *lang).with_context(|| format!("{lang} not in roster"))?;
        let code = overrides.get(lang).cloned().unwrap_or_else(|| spec.code_token.clone());
        let attach = a.adapter_langs.is_empty() || a.adapter_langs.contains(lang);
        let set = data.eval_set(lang, a.split)?;
        let e = evaluate(&config, &params, if attach { adapter.as_ref() } else { None }, &set, &code)?;
        let pairs: Vec<(&str, &str)> = e.hypotheses.iter().map(String::as_str).zip(set.references.iter().map(String::as_str)).collect();
        for &u in &units {
            let r = corpus_score(pairs.iter().copied(), u);
            csv.push_str(&format!(
                "{name},{lang},{},{code},{u},{},{},{},{},{:.6}\n",
                a.split, r.substitutions, r.insertions, r.deletions, r.ref_length, r.rate
            ));
        }
        if let Some(dir) = &a.hyp_dir {
            let mut text = e.hypotheses.join("\n");
            text.push('\n');
            write_new(&dir.join(format!("{name}.{lang}.{}.txt", a.split)), &text)?;
        }
    }
    write_new(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_overlap(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let fishers = paths
        .iter()
        .map(|p| checkpoint::load_fisher(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let first = &fishers[0];
    for (f, p) in fishers.iter().zip(paths).skip(1) {
        first
            .values
            .check_aligned(&f.values, "fisher")
            .map_err(|e| anyhow::Error::from(e).context(format!("{} vs {}", paths[0].display(), p.display())))?;
    }
    let labels: Vec<String> = fishers.iter().map(|f| f.source_tag.clone()).collect();
    let csv = overlap_csv(&labels, &overlap_matrix(&fishers)?);
    if let Some(out) = out {
        write_new(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    let m = ExperimentManifest::from_json(&fs::read_to_string(dir.join("manifest.json")).context("reading manifest.json")?)?;
    let incomplete = incomplete_runs(&m, dir);
    if !incomplete.is_empty() {
        bail!(clab_core::Error::Data(format!("incomplete runs: {}", incomplete.join(", "))));
    }
    let r: Results = serde_json::from_str(&fs::read_to_string(dir.join("results.json")).context("reading results.json")?)?;
    if r.manifest_hash != m.hash() {
        bail!(clab_core::Error::Data("results.json does not belong to manifest.json".into()));
    }
    write_tables(dir, &r)?;
    print!("{}", clab_core::experiments::render_report(&r));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut m = load_manifest(&cli.common)?;
    match cli.cmd {
        Cmd::Manifest => println!("{}", serde_json::to_string_pretty(&m)?),
        Cmd::GenData { roster, out } => cmd_gen_data(&mut m, roster.as_deref(), &out)?,
        Cmd::TrainBase { data, out, epochs, lr } => cmd_train_base(&mut m, &data, &out, epochs, lr)?,
        Cmd::Fisher {
            model,
            data,
            lang,
            split,
            cap,
            out,
        } => cmd_fisher(&m, &model, &data, &lang, split, cap, &out)?,
        Cmd::Adapt(a) => cmd_adapt(&m, &a)?,
        Cmd::Eval(a) => cmd_eval(&m, &a)?,
        Cmd::Overlap { fishers, out } => cmd_overlap(&fishers, out.as_deref())?,
        Cmd::Report { dir } => cmd_report(&dir)?,
        Cmd::Reproduce { out } => {
            let r = reproduce(&m, &out)?;
            println!("manifest {} seed {}", r.manifest_hash, r.seed);
            println!("wrote {}", out.join("report.md").display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<clab_core::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
