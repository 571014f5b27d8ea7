use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use dialect_frontend::aligner::{align_corpus, read_pharaoh, train_ibm1_traced, write_pharaoh, Direction};
use dialect_frontend::corpus::{build_resources, guard_pairs, joined, read_kv, read_lines, read_tsv, write_tsv};
use dialect_frontend::eval::{bench_latency, bleu_units, bleu_with, compare_latency, BenchOptions, LatencyReport};
use dialect_frontend::guard::{guard, PatternSet};
use dialect_frontend::model::checkpoint::{load_checkpoint, save_checkpoint};
use dialect_frontend::model::{Model, ModelConfig, ModelKind};
use dialect_frontend::pipeline::{tsv_row, Pipeline, StageContext};
use dialect_frontend::synth::{generate, DialectRuleSet, Inventory, RuleOptions, SynthConfig};
use dialect_frontend::text::{preprocess, segment_greedy, Lexicon};
use dialect_frontend::training::{prepare_examples, train, Example, TrainConfig, TrainReport};
use dialect_frontend::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dialect-frontend",
    version,
    about = "Mandarin-to-dialect translation frontend for TTS"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus with gold alignments.
    Synth(SynthArgs),
    /// Word-align a parallel corpus with IBM Model 1.
    Align(AlignArgs),
    /// Train the non-autoregressive translator.
    TrainNat(TrainArgs),
    /// Train the autoregressive baseline.
    TrainAt(TrainArgs),
    /// Translate monolingual source text with a teacher model into a TSV corpus.
    Augment(AugmentArgs),
    /// Translate text with a trained model.
    Translate(TranslateArgs),
    /// Run the full frontend pipeline.
    Pipeline(PipelineArgs),
    /// Character BLEU of candidate lines against reference lines.
    Bleu(BleuArgs),
    /// Decoding latency of one or two models.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Seed of the word inventory and rules (defaults to --seed).
    #[arg(long)]
    rule_seed: Option<u64>,
    #[arg(long, default_value_t = 60)]
    vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    irregular_rate: f64,
    /// Character substitutions only, so every gold link is diagonal.
    #[arg(long)]
    substitution_only: bool,
    /// Existing rule file to use instead of random rules.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Corpus TSV output.
    #[arg(long)]
    out: PathBuf,
    /// Gold alignment output (default: OUT.align).
    #[arg(long)]
    align_out: Option<PathBuf>,
    /// Rule file output (default: OUT.rules).
    #[arg(long)]
    rules_out: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// s2t, t2s or sym.
    #[arg(long, default_value = "sym")]
    direction: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus TSV.
    #[arg(long)]
    train: PathBuf,
    /// Pharaoh alignments for the training corpus.
    #[arg(long)]
    align: Option<PathBuf>,
    /// Validation corpus TSV used to keep the best epoch.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Extra teacher-translated pairs, trained on without alignments.
    #[arg(long)]
    augmented: Option<PathBuf>,
    /// Key-value config file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set d_model=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Guard pattern file, one regular expression per line.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Checkpoint output.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log (default: OUT.log.tsv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    mono: PathBuf,
    #[arg(long)]
    patterns: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    /// Text to process.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// File with one input per line (default: stdin).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Write translations here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Translation model; without one the translate stage is the identity.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    input: InputArgs,
    /// Comma-separated stage names.
    #[arg(long, conflicts_with = "stages_file")]
    stages: Option<String>,
    /// Stage names, one per line.
    #[arg(long)]
    stages_file: Option<PathBuf>,
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Segmentation lexicon for the CWS stage (default: the model's).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BleuArgs {
    #[arg(long)]
    cand: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_order: usize,
    /// Add-one smoothing for orders above one.
    #[arg(long)]
    smooth: bool,
    /// Score lexicon words instead of characters.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    nat: Option<PathBuf>,
    #[arg(long)]
    at: Option<PathBuf>,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0.2)]
    seconds_per_char: f64,
    /// Decode exactly this many tokens per sentence.
    #[arg(long)]
    forced_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run manifest written beside an output file.
struct Manifest {
    command: &'static str,
    start: Instant,
    entries: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Manifest {
            command,
            start: Instant::now(),
            entries: BTreeMap::new(),
        }
    }

    fn set(&mut self, k: &str, v: impl ToString) {
        self.entries.insert(k.to_string(), v.to_string());
    }

    fn extend(&mut self, prefix: &str, kv: BTreeMap<String, String>) {
        for (k, v) in kv {
            self.entries.insert(format!("{prefix}{k}"), v);
        }
    }

    fn write_beside(&self, out: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let args: Vec<String> = std::env::args().skip(1).collect();
        let _ = writeln!(s, "argv={}", args.join(" "));
        let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(s, "finished_unix={unix}");
        let _ = writeln!(s, "wall_clock_seconds={:.3}", self.start.elapsed().as_secs_f64());
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        let mut path = out.as_os_str().to_owned();
        path.push(".manifest");
        fs::write(PathBuf::from(path), s)?;
        Ok(())
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn patterns(path: &Option<PathBuf>) -> Result<PatternSet> {
    match path {
        Some(p) => PatternSet::load(p),
        None => Ok(PatternSet::default()),
    }
}

fn inputs(args: &InputArgs) -> Result<Vec<String>> {
    if let Some(t) = &args.text {
        return Ok(vec![t.clone()]);
    }
    match &args.input {
        Some(p) => Ok(fs::read_to_string(p)?.lines().map(str::to_string).collect()),
        None => io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<Vec<_>>>()
            .map_err(Error::from),
    }
}

fn emit(lines: &[String], out: &Option<PathBuf>) -> Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    match out {
        Some(p) => fs::write(p, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let mut m = Manifest::new("synth");
    let rule_seed = a.rule_seed.unwrap_or(a.seed);
    let rules = match &a.rules {
        Some(p) => DialectRuleSet::load(p)?,
        None => {
            let inv = Inventory::new(a.vocab_size, rule_seed)?;
            let opts = if a.substitution_only {
                RuleOptions::substitution_only()
            } else {
                RuleOptions::default()
            };
            DialectRuleSet::random(&inv, rule_seed, &opts)
        }
    };
    let cfg = SynthConfig {
        n: a.n,
        vocab_size: a.vocab_size,
        len_range: (a.min_len, a.max_len),
        seed: a.seed,
        irregular_rate: a.irregular_rate,
    };
    let pairs = generate(&rules, &cfg)?;
    let wp: Vec<_> = pairs.iter().map(|p| p.word_pair()).collect();
    let links: Vec<_> = pairs.iter().map(|p| p.links.clone()).collect();
    write_tsv(&a.out, &wp)?;
    let align_out = a.align_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".align"));
    write_pharaoh(&align_out, &links)?;
    let rules_out = a.rules_out.clone().unwrap_or_else(|| with_suffix(&a.out, ".rules"));
    rules.save(&rules_out)?;
    m.set("seed", a.seed);
    m.set("rule_seed", rules.seed);
    m.set("n", a.n);
    m.set("vocab_size", a.vocab_size);
    m.set("len_range", format!("{}..={}", a.min_len, a.max_len));
    m.set("irregular_rate", a.irregular_rate);
    m.set("substitution_only", a.substitution_only);
    m.set("align_out", align_out.display());
    m.set("rules_out", rules_out.display());
    m.write_beside(&a.out)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn run_align(a: &AlignArgs) -> Result<()> {
    let mut m = Manifest::new("align");
    let corpus = read_tsv(&a.corpus)?;
    let direction: Direction = a.direction.parse()?;
    let (_, ll) = train_ibm1_traced(&corpus, a.iterations)?;
    for (i, l) in ll.iter().enumerate() {
        eprintln!("iteration {}\tlog-likelihood {l:.4}", i + 1);
    }
    let aligns = align_corpus(&corpus, a.iterations, direction)?;
    write_pharaoh(&a.out, &aligns)?;
    m.set("corpus", a.corpus.display());
    m.set("iterations", a.iterations);
    m.set("direction", &a.direction);
    m.write_beside(&a.out)?;
    Ok(())
}

fn run_train(a: &TrainArgs, kind: ModelKind) -> Result<()> {
    let mut m = Manifest::new(match kind {
        ModelKind::Nat => "train-nat",
        ModelKind::At => "train-at",
    });
    let mut kv = match &a.config {
        Some(p) => read_kv(p)?,
        None => BTreeMap::new(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut mcfg = ModelConfig::default();
    mcfg.apply_kv(&kv)?;
    mcfg.kind = kind;
    let mut tcfg = TrainConfig::default();
    tcfg.apply_kv(&kv)?;
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let pats = patterns(&a.patterns)?;
    let raw = read_tsv(&a.train)?;
    let pairs = guard_pairs(&raw, &pats);
    let aligns = match &a.align {
        Some(p) => Some(read_pharaoh(p, &raw)?),
        None => None,
    };
    let aug_pairs = match &a.augmented {
        Some(p) => guard_pairs(&read_tsv(p)?, &pats),
        None => Vec::new(),
    };
    let mut all = pairs.clone();
    all.extend(aug_pairs.iter().cloned());
    let (vocab, lexicon) = build_resources(&all)?;
    let model = Model::new(mcfg, vocab, lexicon, tcfg.seed)?;
    let (train_ex, skipped) = prepare_examples(&model, &pairs, aligns.as_deref())?;
    let (aug_ex, aug_skipped) = prepare_examples(&model, &aug_pairs, None)?;
    let valid_ex: Vec<Example> = match &a.valid {
        Some(p) => prepare_examples(&model, &guard_pairs(&read_tsv(p)?, &pats), None)?.0,
        None => Vec::new(),
    };
    if skipped + aug_skipped > 0 {
        eprintln!("skipped {} empty or over-length pairs", skipped + aug_skipped);
    }
    eprintln!(
        "training {} on {} pairs (+{} augmented), {} parameters",
        kind,
        train_ex.len(),
        aug_ex.len(),
        model.params.scalar_count()
    );
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.tsv"));
    let mut log = String::from(TrainReport::TSV_HEADER);
    log.push('\n');
    let result = train(model, &train_ex, &aug_ex, &valid_ex, &tcfg, |r| {
        let line = TrainReport::tsv_line(r);
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    });
    fs::write(&log_path, &log)?;
    let (trained, report) = match result {
        Ok(r) => r,
        Err(Error::Diverged { step, last_finite }) => {
            let p = with_suffix(&a.out, ".diverged");
            save_checkpoint(&last_finite, &p)?;
            eprintln!("saved last finite parameters to {}", p.display());
            return Err(Error::Diverged { step, last_finite });
        }
        Err(e) => return Err(e),
    };
    save_checkpoint(&trained, &a.out)?;
    m.extend("model.", trained.config.to_kv());
    m.extend("train.", tcfg.to_kv());
    m.set("seed", tcfg.seed);
    m.set("train", a.train.display());
    if let Some(p) = &a.align {
        m.set("align", p.display());
    }
    if let Some(p) = &a.valid {
        m.set("valid", p.display());
    }
    if let Some(p) = &a.augmented {
        m.set("augmented", p.display());
    }
    m.set("best_epoch", report.best_epoch);
    m.set("log", log_path.display());
    m.write_beside(&a.out)?;
    Ok(())
}

fn run_augment(a: &AugmentArgs) -> Result<()> {
    let mut m = Manifest::new("augment");
    let teacher = load_checkpoint(&a.teacher)?;
    let pats = patterns(&a.patterns)?;
    let mut rows = Vec::new();
    for line in read_lines(&a.mono)? {
        let g = guard(&line, &pats);
        let cleaned = preprocess(&g.guarded);
        if cleaned.trim().is_empty() {
            continue;
        }
        let words = segment_greedy(cleaned.trim(), &teacher.lexicon).words;
        let words: Vec<String> = words.into_iter().filter(|w| !w.trim().is_empty()).collect();
        let src = joined(&words);
        let out = teacher.translate_guarded(&src)?;
        if out.text.is_empty() {
            continue;
        }
        rows.push((words, vec![out.text.replace(' ', "")]));
    }
    write_tsv(&a.out, &rows)?;
    m.set("teacher", a.teacher.display());
    m.set("mono", a.mono.display());
    m.set("pairs", rows.len());
    m.write_beside(&a.out)?;
    eprintln!("wrote {} augmented pairs", rows.len());
    Ok(())
}

fn run_translate(a: &TranslateArgs) -> Result<()> {
    let mut m = Manifest::new("translate");
    let model = load_checkpoint(&a.model)?;
    let pats = patterns(&a.patterns)?;
    let lines = inputs(&a.input)?
        .iter()
        .map(|l| model.translate(l, &pats).map(|r| r.text.replace('\n', " ")))
        .collect::<Result<Vec<_>>>()?;
    emit(&lines, &a.out)?;
    if let Some(out) = &a.out {
        m.set("model", a.model.display());
        m.write_beside(out)?;
    }
    Ok(())
}

fn run_pipeline(a: &PipelineArgs) -> Result<()> {
    let mut m = Manifest::new("pipeline");
    let model = match &a.model {
        Some(p) => Some(Arc::new(load_checkpoint(p)?)),
        None => None,
    };
    let lexicon = match (&a.lexicon, &model) {
        (Some(p), _) => Lexicon::load(p)?,
        (None, Some(m)) => m.lexicon.clone(),
        (None, None) => Lexicon::default(),
    };
    let ctx = StageContext {
        model,
        patterns: patterns(&a.patterns)?,
        lexicon,
    };
    let pipeline = match (&a.stages, &a.stages_file) {
        (Some(s), _) => {
            let names: Vec<&str> = s.split(',').map(str::trim).filter(|n| !n.is_empty()).collect();
            Pipeline::from_names(&names, &ctx)?
        }
        (None, Some(p)) => Pipeline::load(p, &ctx)?,
        (None, None) => Pipeline::default_with(&ctx)?,
    };
    let rows = inputs(&a.input)?
        .iter()
        .map(|l| pipeline.run(l).map(|d| tsv_row(&d)))
        .collect::<Result<Vec<_>>>()?;
    emit(&rows, &a.out)?;
    if let Some(out) = &a.out {
        m.set("stages", pipeline.stage_names().join(","));
        if let Some(p) = &a.model {
            m.set("model", p.display());
        }
        m.write_beside(out)?;
    }
    Ok(())
}

fn run_bleu(a: &BleuArgs) -> Result<()> {
    let mut m = Manifest::new("bleu");
    let lex = match &a.lexicon {
        Some(p) => Some(Lexicon::load(p)?),
        None => None,
    };
    let load = |p: &Path| -> Result<Vec<Vec<String>>> {
        Ok(fs::read_to_string(p)?
            .lines()
            .map(|l| bleu_units(l, lex.as_ref()))
            .collect())
    };
    let cand = load(&a.cand)?;
    let refs = load(&a.reference)?;
    let r = bleu_with(&cand, &refs, a.max_order, a.smooth)?;
    let line = format!("{:.4}", r.bleu);
    emit(&[line], &a.out)?;
    let p: Vec<String> = r.precisions.iter().map(|p| format!("{p:.4}")).collect();
    eprintln!(
        "precisions {} bp {:.4} ({} / {})",
        p.join(" "),
        r.brevity_penalty,
        r.candidate_len,
        r.reference_len
    );
    if let Some(out) = &a.out {
        m.set("cand", a.cand.display());
        m.set("ref", a.reference.display());
        m.set("max_order", a.max_order);
        m.set("smooth", a.smooth);
        m.write_beside(out)?;
    }
    Ok(())
}

fn report_lines(name: &str, r: &LatencyReport) -> Vec<String> {
    vec![
        format!("{name}\tmean_latency_s\t{:.6}", r.mean_latency),
        format!("{name}\tlatency_per_char_s\t{:.6}", r.mean_latency_per_char),
        format!("{name}\trtf_proxy\t{:.6}", r.rtf_proxy),
    ]
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let mut m = Manifest::new("bench");
    let opts = BenchOptions {
        repetitions: a.repetitions,
        warmup: a.warmup,
        seconds_per_char: a.seconds_per_char,
        forced_len: a.forced_len,
    };
    let nat = a.nat.as_ref().map(load_checkpoint).transpose()?;
    let at = a.at.as_ref().map(load_checkpoint).transpose()?;
    let lines: Vec<String> = read_lines(&a.input)?;
    let segment = |model: &Model| lines.iter().map(|l| model.segment(&preprocess(l))).collect::<Vec<_>>();
    let mut out = Vec::new();
    match (&nat, &at) {
        (Some(n), Some(t)) => {
            let c = compare_latency(n, t, &segment(n), &opts)?;
            out.extend(report_lines("nat", &c.nat));
            out.extend(report_lines("at", &c.at));
            out.push(format!("speedup\t{:.3}", c.speedup));
        }
        (Some(n), None) => out.extend(report_lines("nat", &bench_latency(n, &segment(n), &opts)?)),
        (None, Some(t)) => out.extend(report_lines("at", &bench_latency(t, &segment(t), &opts)?)),
        (None, None) => return Err(Error::Config("bench needs --nat, --at or both".into())),
    }
    emit(&out, &a.out)?;
    if let Some(o) = &a.out {
        m.set("repetitions", a.repetitions);
        m.set("warmup", a.warmup);
        m.set("seconds_per_char", a.seconds_per_char);
        if let Some(f) = a.forced_len {
            m.set("forced_len", f);
        }
        m.write_beside(o)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Pattern { .. } => 2,
        Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Align(a) => run_align(a),
        Command::TrainNat(a) => run_train(a, ModelKind::Nat),
        Command::TrainAt(a) => run_train(a, ModelKind::At),
        Command::Augment(a) => run_augment(a),
        Command::Translate(a) => run_translate(a),
        Command::Pipeline(a) => run_pipeline(a),
        Command::Bleu(a) => run_bleu(a),
        Command::Bench(a) => run_bench(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
