use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ctcbias::adapter::{
    attention_accuracy, train_adapter, AdapterDims, AdapterParams, CatalogSchedule, ToyTask,
    ToyTaskConfig, TrainConfig, DEFAULT_ATTN_DIM,
};
use ctcbias::error::{read_file, read_text, write_file};
use ctcbias::eval::{RarityTable, DEFAULT_RARE_THRESHOLD};
use ctcbias::fixtures::{parse_transcripts, Corpus, FixtureConfig};
use ctcbias::hypothesis::{read_jsonl, write_jsonl};
use ctcbias::phonealign::{
    lexicon_lookup_replace, rescore_nbest, PhoneContext, RescoreConfig, DEFAULT_DTW_SCALE,
    DEFAULT_SMOOTH_WINDOW,
};
use ctcbias::phones::SILENCE;
use ctcbias::pipeline::{
    evaluate_transcripts, run_corpus, Pipeline, PipelineConfig, Resources, UtteranceInput,
};
use ctcbias::{
    BoostMode, BoostSign, DecodeConfig, EmissionMatrix, EntityCatalog, Lexicon, NGramModel,
    PhonePosteriorMatrix, PhoneSet, PhoneSimilarityTable, SubwordVocab, TrieConfig,
    UtteranceResult,
};

#[derive(Parser)]
#[command(
    name = "ctcbias",
    version,
    about = "Contextual biasing for CTC speech recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Beam-search decode emission files into n-best JSON lines.
    Decode(DecodeArgs),
    /// Reorder n-best lists by phonetic alignment against phone posteriors.
    Rescore(RescoreArgs),
    /// Replace misrecognized words in the 1-best with catalog entities.
    Correct(CorrectArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Run decode, rescore and correction over a corpus directory and score it.
    Pipeline(PipelineArgs),
    /// Write the synthetic evaluation corpus.
    Fixtures(FixturesArgs),
    /// Train or evaluate the contextual adapter on the synthetic toy task.
    #[command(subcommand)]
    Adapter(AdapterCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum BoostArg {
    Adaptive,
    Off,
    PaperLiteral,
}

#[derive(Args)]
struct DecodeArgs {
    /// An emission file or a directory of `.ctce` files; ids are file stems.
    #[arg(long)]
    emissions: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    lm_weight: f64,
    #[arg(long, default_value_t = 50)]
    beam: usize,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// Added once per emitted word.
    #[arg(long, default_value_t = 0.0)]
    word_penalty: f64,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BoostArg::Adaptive)]
    boost_mode: BoostArg,
    /// Unit similarity pairs used to add spelling variants to the trie.
    #[arg(long)]
    g2g_table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    g2g_variants: usize,
    #[arg(long, default_value_t = 10)]
    seg_variants: usize,
    /// Minimum log10 unigram probability for catalog words.
    #[arg(long, allow_hyphen_values = true)]
    unigram_boost: Option<f64>,
    #[arg(long, default_value_t = 10)]
    nbest: usize,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PhoneArgs {
    /// A posterior file or a directory of `.ctcp` files.
    #[arg(long)]
    phone_posteriors: PathBuf,
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    phones: PathBuf,
}

#[derive(Args)]
struct RescoreArgs {
    /// Decoder JSON lines.
    #[arg(long)]
    nbest: PathBuf,
    /// The emissions the n-best lists were decoded from.
    #[arg(long)]
    emissions: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    phone: PhoneArgs,
    /// When given, the rescored 1-best is also lexicon-corrected.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DTW_SCALE)]
    dtw_scale: f64,
    #[arg(long, default_value_t = DEFAULT_SMOOTH_WINDOW)]
    smooth_window: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CorrectArgs {
    /// Rescored JSON lines; the 1-best must carry word boundaries.
    #[arg(long)]
    nbest: PathBuf,
    #[command(flatten)]
    phone: PhoneArgs,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SMOOTH_WINDOW)]
    smooth_window: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// `id word word ...` lines.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// `id word word ...` lines or decoder JSON lines (1-best is scored).
    #[arg(long)]
    hyp: PathBuf,
    /// `word count` lines from the training transcripts.
    #[arg(long)]
    freq_table: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RARE_THRESHOLD)]
    rare_threshold: u64,
    /// JSON report file; standard output when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineMode {
    Full,
    Baseline,
}

#[derive(Args)]
struct PipelineArgs {
    /// Directory written by `fixtures`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = PipelineMode::Full)]
    mode: PipelineMode,
    #[arg(long)]
    no_rescore: bool,
    #[arg(long)]
    no_correct: bool,
    /// Final transcripts as JSON lines.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    entity_utterances: usize,
    #[arg(long, default_value_t = 100)]
    control_utterances: usize,
}

#[derive(Subcommand)]
enum AdapterCommand {
    Train(AdapterTrainArgs),
    Eval(AdapterEvalArgs),
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `start,step,cap` catalog sizes per epoch.
    #[arg(long, default_value = "30,4,250", value_parser = parse_schedule)]
    catalog_size_schedule: CatalogSchedule,
    /// Words seen fewer times than this in training are rare.
    #[arg(long, default_value_t = 13)]
    threshold: usize,
}

#[derive(Args)]
struct AdapterTrainArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Checkpoint to write.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AdapterEvalArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

fn parse_schedule(s: &str) -> std::result::Result<CatalogSchedule, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [start, step, cap] => Ok(CatalogSchedule {
            start: *start,
            step: *step,
            cap: *cap,
        }),
        _ => Err("expected start,step,cap".into()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Decode(a) => decode(a),
        Command::Rescore(a) => rescore(a),
        Command::Correct(a) => correct(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Fixtures(a) => fixtures(a),
        Command::Adapter(AdapterCommand::Train(a)) => adapter_train(a),
        Command::Adapter(AdapterCommand::Eval(a)) => adapter_eval(a),
    }
}

/// Loads one file, or every file with extension `ext` in a directory, keyed
/// by file stem and sorted by id.
fn load_inputs<T>(
    path: &Path,
    ext: &str,
    load: impl Fn(&[u8]) -> ctcbias::Result<T>,
) -> Result<Vec<(String, T)>> {
    let files = if path.is_dir() {
        let mut files = Vec::new();
        for entry in
            std::fs::read_dir(path).with_context(|| format!("reading {}", path.display()))?
        {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == ext) {
                files.push(p);
            }
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = files
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .with_context(|| format!("no file name in {}", p.display()))?;
            let value =
                load(&read_file(&p)?).with_context(|| format!("loading {}", p.display()))?;
            Ok((id, value))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn text(path: &Path) -> Result<String> {
    Ok(read_text(path)?)
}

fn emit(output: Option<&Path>, data: &str) -> Result<()> {
    match output {
        Some(p) => write_file(p, data)?,
        None => std::io::stdout().lock().write_all(data.as_bytes())?,
    }
    Ok(())
}

fn load_phones(
    a: &PhoneArgs,
) -> Result<(PhoneSet, Lexicon, HashMap<String, PhonePosteriorMatrix>)> {
    let phones = PhoneSet::parse(&text(&a.phones)?)?;
    let lexicon = Lexicon::parse(&text(&a.lexicon)?, &phones)?;
    let posteriors = load_inputs(&a.phone_posteriors, "ctcp", PhonePosteriorMatrix::load)?
        .into_iter()
        .collect();
    Ok((phones, lexicon, posteriors))
}

fn decode(a: DecodeArgs) -> Result<()> {
    let (boost_mode, boost_sign) = match a.boost_mode {
        BoostArg::Adaptive => (BoostMode::Adaptive, BoostSign::Corrected),
        BoostArg::Off => (BoostMode::Off, BoostSign::Corrected),
        BoostArg::PaperLiteral => (BoostMode::Adaptive, BoostSign::PaperLiteral),
    };
    let catalog = match &a.catalog {
        Some(p) => EntityCatalog::parse(&text(p)?)?,
        None => EntityCatalog::default(),
    };
    let g2g = match &a.g2g_table {
        Some(p) => PhoneSimilarityTable::parse(&text(p)?)?,
        None => PhoneSimilarityTable::default(),
    };
    let resources = Resources {
        vocab: SubwordVocab::parse(&text(&a.vocab)?)?,
        lm: match &a.lm {
            Some(p) => Some(NGramModel::from_arpa(&text(p)?)?),
            None => None,
        },
        catalog,
        lexicon: Lexicon::default(),
        phones: PhoneSet::new(vec![SILENCE.to_string()])?,
        g2g,
    };
    let config = PipelineConfig {
        decode: DecodeConfig {
            beam_size: a.beam,
            top_k: a.topk,
            lm_weight: a.lm_weight,
            word_penalty: a.word_penalty,
            boost_mode,
            boost_sign,
            nbest: a.nbest,
            ..DecodeConfig::default()
        },
        trie: TrieConfig {
            seg_variants: a.seg_variants,
            g2g_variants: a.g2g_variants,
        },
        unigram_boost: a.unigram_boost,
        rescore: None,
        correct: None,
    };
    let pipeline = Pipeline::new(&resources, config)?;
    let emissions = load_inputs(&a.emissions, "ctce", EmissionMatrix::load)?;
    let inputs: Vec<UtteranceInput<'_>> = emissions
        .iter()
        .map(|(id, e)| UtteranceInput {
            id,
            emissions: e,
            posteriors: None,
        })
        .collect();
    let results: Vec<UtteranceResult> = pipeline
        .run(&inputs)?
        .iter()
        .map(|r| r.as_utterance_result())
        .collect();
    emit(a.output.as_deref(), &write_jsonl(&results)?)
}

fn rescore(a: RescoreArgs) -> Result<()> {
    let vocab = SubwordVocab::parse(&text(&a.vocab)?)?;
    let (phones, lexicon, posteriors) = load_phones(&a.phone)?;
    let emissions: HashMap<String, EmissionMatrix> =
        load_inputs(&a.emissions, "ctce", EmissionMatrix::load)?
            .into_iter()
            .collect();
    let catalog = match &a.catalog {
        Some(p) => Some(EntityCatalog::parse(&text(p)?)?),
        None => None,
    };
    let ctx = PhoneContext {
        lexicon: &lexicon,
        phones: &phones,
        vocab: &vocab,
    };
    let config = RescoreConfig {
        dtw_scale: a.dtw_scale,
        ..RescoreConfig::default()
    };
    let mut results = read_jsonl(&text(&a.nbest)?)?;
    for r in &mut results {
        let e = emissions
            .get(&r.id)
            .with_context(|| format!("no emissions for utterance {:?}", r.id))?;
        let p = posteriors
            .get(&r.id)
            .with_context(|| format!("no phone posteriors for utterance {:?}", r.id))?;
        r.nbest = rescore_nbest(&r.nbest, e, p, ctx, config)?;
        if let (Some(catalog), Some(best)) = (&catalog, r.nbest.first_mut()) {
            *best = lexicon_lookup_replace(best, p, catalog, &lexicon, &phones, a.smooth_window)?;
        }
    }
    emit(a.output.as_deref(), &write_jsonl(&results)?)
}

fn correct(a: CorrectArgs) -> Result<()> {
    let (phones, lexicon, posteriors) = load_phones(&a.phone)?;
    let catalog = EntityCatalog::parse(&text(&a.catalog)?)?;
    let mut results = read_jsonl(&text(&a.nbest)?)?;
    for r in &mut results {
        let p = posteriors
            .get(&r.id)
            .with_context(|| format!("no phone posteriors for utterance {:?}", r.id))?;
        if let Some(best) = r.nbest.first_mut() {
            if best.word_boundaries.is_none() {
                bail!(
                    "utterance {:?} has no word boundaries; run rescore first",
                    r.id
                );
            }
            *best = lexicon_lookup_replace(best, p, &catalog, &lexicon, &phones, a.smooth_window)?;
        }
    }
    emit(a.output.as_deref(), &write_jsonl(&results)?)
}

/// Reads `id word ...` lines, or the 1-best of decoder JSON lines.
fn read_hypotheses(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let body = text(path)?;
    if body.trim_start().starts_with('{') {
        Ok(read_jsonl(&body)?
            .into_iter()
            .map(|r| {
                let words = r.best().map(|h| h.words.clone()).unwrap_or_default();
                (r.id, words)
            })
            .collect())
    } else {
        Ok(parse_transcripts(&body)?)
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let refs = parse_transcripts(&text(&a.reference)?)?;
    let hyps = read_hypotheses(&a.hyp)?;
    let table = RarityTable::parse(&text(&a.freq_table)?, a.rare_threshold)?;
    let report = evaluate_transcripts(&refs, &hyps, &table)?;
    emit(
        a.report.as_deref(),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let corpus = Corpus::read(&a.corpus)?;
    let resources = Resources::from_corpus(&corpus)?;
    let mut config = match a.mode {
        PipelineMode::Full => PipelineConfig::full(),
        PipelineMode::Baseline => PipelineConfig::baseline(),
    };
    if a.no_rescore {
        config.rescore = None;
    }
    if a.no_correct {
        config.correct = None;
    }
    let (results, report) = run_corpus(&corpus, &resources, config)?;
    if let Some(out) = &a.output {
        let mut lines = String::new();
        for r in &results {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        write_file(out, lines)?;
    }
    emit(
        a.report.as_deref(),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )
}

fn fixtures(a: FixturesArgs) -> Result<()> {
    let corpus = Corpus::generate(&FixtureConfig {
        seed: a.seed,
        entity_utterances: a.entity_utterances,
        control_utterances: a.control_utterances,
        ..FixtureConfig::default()
    })?;
    corpus.write(&a.out)?;
    eprintln!(
        "wrote {} utterances and {} catalog entities to {}",
        corpus.utterances.len(),
        corpus.catalog.entities().len(),
        a.out.display()
    );
    Ok(())
}

fn toy_task(toy: &ToyArgs) -> Result<ToyTask> {
    Ok(ToyTask::generate(&ToyTaskConfig {
        seed: toy.seed,
        ..ToyTaskConfig::default()
    })?)
}

fn report_attention(task: &ToyTask, params: &AdapterParams, toy: &ToyArgs) -> Result<()> {
    let (acc, frames) = attention_accuracy(
        params,
        &task.encoder,
        &task.held_out,
        &task.vocab,
        &task.rare_pool,
        toy.catalog_size_schedule.start,
        toy.seed,
    )?;
    println!("held-out rare frames: {frames}, entity attention above no-bias: {acc:.3}");
    Ok(())
}

fn adapter_train(a: AdapterTrainArgs) -> Result<()> {
    let task = toy_task(&a.toy)?;
    let dims = AdapterDims {
        vocab: task.vocab.len(),
        dim: task.config.dim,
        attn_dim: DEFAULT_ATTN_DIM,
        taps: task.encoder.taps().len(),
    };
    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        schedule: a.toy.catalog_size_schedule,
        rare_threshold: a.toy.threshold,
        seed: a.toy.seed,
        ..TrainConfig::default()
    };
    let report = train_adapter(
        &task.encoder,
        &task.train,
        &task.vocab,
        AdapterParams::init(dims, a.toy.seed)?,
        &config,
    )?;
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.4}");
    }
    println!(
        "loss {:.4} -> {:.4}",
        report.initial_loss, report.final_loss
    );
    report_attention(&task, &report.params, &a.toy)?;
    if let Some(out) = &a.output {
        write_file(out, report.params.to_bytes())?;
    }
    Ok(())
}

fn adapter_eval(a: AdapterEvalArgs) -> Result<()> {
    let task = toy_task(&a.toy)?;
    let params = AdapterParams::from_bytes(&read_file(&a.checkpoint)?)?;
    if params.dims().vocab != task.vocab.len() {
        bail!(
            "checkpoint has {} piece embeddings, the toy vocabulary has {}",
            params.dims().vocab,
            task.vocab.len()
        );
    }
    report_attention(&task, &params, &a.toy)
}
