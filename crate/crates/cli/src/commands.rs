use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sugmine::augment::{oversample_discourse, train_baseline};
use sugmine::config::{parse_config, AugmentMethod, RunConfig};
use sugmine::corpus::{balance_stats, load_dataset, Format};
use sugmine::embed::{build_vocab, train_skipgram, CLS};
use sugmine::explain::{
    aggregate_saliency, attention_saliency, domain_sage, export_heatmap, export_wordcloud_data, rank_entries,
    SageConfig, WordCloudSource, STOPWORDS,
};
use sugmine::pipeline::{evaluate, run_pipeline, smote_examples};
use sugmine::synth::{generate, SynthConfig};
use sugmine::tensor::Matrix;
use sugmine::textprep::{build_lexicon, preprocess_dataset, tokenize};
use sugmine::xformer::{self, TrainExample};
use sugmine::{
    Artifacts, BaselineClassifier, Dataset, Domain, EmbeddingMatrix, Error, Lexicon, Split, TokenSeq,
    TransformerModel,
};

use crate::args::*;
use crate::manifest::{ensure_distinct, manifest_path, CommandManifest};
use crate::CliError;

type CmdResult = Result<(), CliError>;

pub fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Preprocess(a) => preprocess(cli, a),
        Command::TrainEmbeddings(a) => train_embeddings(cli, a),
        Command::TrainBaseline(a) => train_baseline_cmd(cli, a),
        Command::Augment(a) => augment(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Run(a) => run(cli, a),
        Command::Explain(a) => explain(a),
        Command::Sage(a) => sage(cli, a),
        Command::Generate(a) => generate_cmd(cli, a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn load(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path, Format::from_path(path))?)
}

/// Test rows of a file; a file without a split column (or only one split)
/// is taken whole.
fn test_rows(d: Dataset) -> Dataset {
    if d.iter().any(|r| r.split == Split::Test) {
        d.split(Split::Test)
    } else {
        d
    }
}

/// Config from `--config` (or defaults) with the global seed applied.
fn config(cli: &Cli, path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn load_lexicon(path: &Path) -> Result<Lexicon, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let counts: BTreeMap<String, u64> = serde_json::from_str(&text)
        .map_err(|e| Error::Malformed {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?;
    Ok(Lexicon::from_counts(counts))
}

fn lexicon_json(lex: &Lexicon) -> String {
    let counts: BTreeMap<&str, u64> = lex.words().map(|w| (w, lex.frequency(w))).collect();
    serde_json::to_string(&counts).expect("lexicon serializes")
}

fn token_lists(d: &Dataset) -> Vec<Vec<String>> {
    d.iter().map(|r| tokenize(&r.text)).collect()
}

#[derive(Serialize)]
struct CellStats {
    domain: Domain,
    split: Split,
    suggestion_count: usize,
    non_suggestion_count: usize,
    ratio: f64,
}

fn ingest(a: &IngestArgs) -> CmdResult {
    ensure_distinct(&[&a.input], &[&a.out])?;
    let format = a.format.map(Format::from).unwrap_or_else(|| Format::from_path(&a.input));
    let d = load_dataset(&a.input, format)?;
    let stats = balance_stats(&d)?;
    d.save(&a.out, Format::Jsonl)?;
    let cells: Vec<CellStats> = stats
        .cells
        .iter()
        .map(|(&(domain, split), c)| CellStats {
            domain,
            split,
            suggestion_count: c.suggestion_count,
            non_suggestion_count: c.non_suggestion_count,
            ratio: c.ratio,
        })
        .collect();
    let json = serde_json::to_string_pretty(&cells).expect("stats serialize");
    println!("{json}");
    log::info!("ingested {} reviews into {}", d.len(), a.out.display());
    let mut m = CommandManifest::new("ingest", &serde_json::json!({ "format": format }), BTreeMap::new());
    m.input(&a.input)?;
    m.finish(&manifest_path(&a.out), &[&a.out])
}

fn preprocess(cli: &Cli, a: &PreprocessArgs) -> CmdResult {
    let mut outs: Vec<&Path> = vec![&a.out];
    outs.extend(a.lexicon_out.as_deref());
    ensure_distinct(&[&a.input], &outs)?;
    let mut cfg = config(cli, a.config.config.as_deref())?;
    if let Some(t) = a.threshold {
        cfg.preprocess.spell_threshold = t;
    }
    if a.wordlist.is_some() {
        cfg.paths.wordlist = a.wordlist.clone();
    }
    cfg.validate()?;
    let p = &cfg.preprocess;
    let d = load(&a.input)?;
    let lexicon = if p.spell_correct {
        build_lexicon(&d.split(Split::Train), p.lexicon_min_count, cfg.paths.wordlist.as_deref())?
    } else {
        Lexicon::default()
    };
    let out = preprocess_dataset(&d, &lexicon, p.spell_threshold)?;
    out.save(&a.out, Format::Jsonl)?;
    if let Some(path) = &a.lexicon_out {
        write_file(path, &lexicon_json(&lexicon))?;
    }
    log::info!("preprocessed {} reviews with a lexicon of {} words", out.len(), lexicon.len());
    let mut m = CommandManifest::new("preprocess", &serde_json::json!({ "preprocess": p, "wordlist": cfg.paths.wordlist }), BTreeMap::new());
    m.input(&a.input)?;
    if let Some(w) = &cfg.paths.wordlist {
        m.input(w)?;
    }
    m.finish(&manifest_path(&a.out), &outs)
}

fn train_embeddings(cli: &Cli, a: &TrainEmbeddingsArgs) -> CmdResult {
    let mut ins: Vec<&Path> = vec![&a.input];
    ins.extend(a.init.as_deref());
    ensure_distinct(&ins, &[&a.out])?;
    let mut cfg = config(cli, a.config.config.as_deref())?.embed;
    if let Some(d) = a.dim {
        cfg.d_emb = d;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let d = load(&a.input)?.split(Split::Train);
    let seqs: Vec<TokenSeq> = d.iter().map(|r| TokenSeq::new(r.id.clone(), tokenize(&r.text))).collect();
    let init = match &a.init {
        Some(p) => Some(EmbeddingMatrix::load(p)?),
        None => None,
    };
    let vocab = build_vocab(&seqs, cfg.min_count)?;
    let (emb, trace) = train_skipgram(&token_lists(&d), &vocab, &cfg, init.as_ref().map(|(v, e, _)| (v, e)))?;
    emb.save(&vocab, cfg.seed, &a.out)?;
    log::info!("trained {} x {} embeddings; loss trace {:?}", vocab.len(), emb.d_emb(), trace);
    let mut m = CommandManifest::new("train-embeddings", &cfg, seeds(&[("embed", cfg.seed)]));
    for i in ins {
        m.input(i)?;
    }
    m.finish(&manifest_path(&a.out), &[&a.out])
}

fn train_baseline_cmd(cli: &Cli, a: &TrainBaselineArgs) -> CmdResult {
    ensure_distinct(&[&a.input, &a.emb], &[&a.out])?;
    let cfg = config(cli, a.config.config.as_deref())?.baseline;
    let d = load(&a.input)?;
    let (vocab, emb, _) = EmbeddingMatrix::load(&a.emb)?;
    let c = train_baseline(&d, &emb, &vocab, &cfg)?;
    write_file(&a.out, &serde_json::to_string(&c).expect("baseline serializes"))?;
    log::info!("baseline fitted on {} reviews", c.trained_examples);
    let mut m = CommandManifest::new("train-baseline", &cfg, seeds(&[("baseline", cfg.seed)]));
    m.input(&a.input)?;
    m.input(&a.emb)?;
    m.finish(&manifest_path(&a.out), &[&a.out])
}

/// One SMOTE point as written by `augment --method smote`.
#[derive(Debug, Serialize, Deserialize)]
struct SmotePoint {
    domain: Domain,
    vector: Vec<f64>,
}

fn augment(cli: &Cli, a: &AugmentArgs) -> CmdResult {
    let mut ins: Vec<&Path> = vec![&a.input, &a.emb];
    ins.extend(a.baseline.as_deref());
    ensure_distinct(&ins, &[&a.out])?;
    let mut cfg = config(cli, a.config.config.as_deref())?.augment;
    cfg.method = AugmentMethod::from(a.method);
    if let Some(m) = &a.markers {
        cfg.markers = m.clone();
    }
    let d = load(&a.input)?;
    let (vocab, emb, _) = EmbeddingMatrix::load(&a.emb)?;
    let mut summary = serde_json::Value::Null;
    match cfg.method {
        AugmentMethod::Discourse => {
            let path = a
                .baseline
                .as_deref()
                .ok_or_else(|| CliError::Usage("--baseline is required for discourse augmentation".into()))?;
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let c: BaselineClassifier = serde_json::from_str(&text).map_err(|e| Error::Malformed {
                location: path.display().to_string(),
                reason: e.to_string(),
            })?;
            let (out, report) = oversample_discourse(&d, &c, &cfg.markers, &emb, &vocab)?;
            out.save(&a.out, Format::Jsonl)?;
            log::info!("discourse augmentation: {report:?}");
            summary = serde_json::to_value(&report).expect("report serializes");
        }
        AugmentMethod::Smote => {
            let points = smote_examples(&d.split(Split::Train), &vocab, &emb, cfg.smote_k, cfg.smote_ratio, cfg.seed)?;
            let mut buf = String::new();
            let mut added = BTreeMap::new();
            for (domain, vs) in points {
                added.insert(domain, vs.len());
                for vector in vs {
                    buf.push_str(&serde_json::to_string(&SmotePoint { domain, vector }).expect("point serializes"));
                    buf.push('\n');
                }
            }
            write_file(&a.out, &buf)?;
            log::info!("SMOTE points per domain: {added:?}");
            summary = serde_json::to_value(&added).expect("counts serialize");
        }
        AugmentMethod::None => d.save(&a.out, Format::Jsonl)?,
    }
    let mut m = CommandManifest::new(
        "augment",
        &serde_json::json!({ "augment": &cfg, "summary": summary }),
        seeds(&[("augment", cfg.seed)]),
    );
    for i in ins {
        m.input(i)?;
    }
    m.finish(&manifest_path(&a.out), &[&a.out])
}

fn load_smote(path: &Path) -> Result<Vec<SmotePoint>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(Error::Malformed {
                    location: format!("{}:{}", path.display(), i + 1),
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}

fn train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut ins: Vec<&Path> = vec![&a.input, &a.emb];
    ins.extend(a.smote.as_deref());
    ins.extend(a.lexicon.as_deref());
    ensure_distinct(&ins, &[&a.out])?;
    let mut cfg = config(cli, a.config.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.transformer.epochs = e;
    }
    cfg.validate()?;
    let d = load(&a.input)?.split(Split::Train);
    let (vocab, emb, _) = EmbeddingMatrix::load(&a.emb)?;
    let mut model = TransformerModel::new(cfg.transformer.clone(), emb.d_emb())?;
    model.set_cls(emb.vector(CLS))?;
    let mut examples: Vec<TrainExample> = d
        .iter()
        .map(|r| {
            Ok(TrainExample {
                rows: model.token_rows(&tokenize(&r.text), &vocab, &emb)?,
                suggestion: r.label.is_suggestion(),
                domain: r.domain,
            })
        })
        .collect::<sugmine::Result<_>>()?;
    if let Some(p) = &a.smote {
        for pt in load_smote(p)? {
            if pt.vector.len() != emb.d_emb() {
                return Err(Error::Shape(format!(
                    "SMOTE vector has {} entries, embeddings have {}",
                    pt.vector.len(),
                    emb.d_emb()
                ))
                .into());
            }
            examples.push(TrainExample {
                rows: Matrix::from_vec(1, pt.vector.len(), pt.vector),
                suggestion: true,
                domain: pt.domain,
            });
        }
    }
    log::info!("training on {} examples", examples.len());
    let trace = xformer::train(&mut model, &examples)?;
    log::info!("epoch losses {:?}", trace.epoch_loss);
    model.save(&a.out)?;
    if let Some(dir) = &a.artifacts {
        let lexicon = match &a.lexicon {
            Some(p) => load_lexicon(p)?,
            None => Lexicon::default(),
        };
        Artifacts {
            config: cfg.clone(),
            lexicon,
            vocab,
            embeddings: emb,
            model,
            baseline: None,
        }
        .save(dir)?;
    }
    let mut m = CommandManifest::new("train", &cfg, cfg.seeds());
    for i in ins {
        m.input(i)?;
    }
    m.finish(&manifest_path(&a.out), &[&a.out])
}

fn evaluate_cmd(a: &EvaluateArgs) -> CmdResult {
    ensure_distinct(&[&a.test], &[&a.out])?;
    let artifacts = Artifacts::load(&a.artifacts)?;
    let test = test_rows(load(&a.test)?);
    let report = evaluate(&test, &artifacts)?;
    write_file(&a.out, &report.to_json())?;
    log::info!(
        "pooled fine-grain F1 {:.4}; per domain {:?}",
        report.pooled_fine_grain,
        report.per_domain
    );
    let mut m = CommandManifest::new("evaluate", &artifacts.config, artifacts.config.seeds());
    m.input(&a.test)?;
    m.input(&a.artifacts.join("model.ckpt"))?;
    m.finish(&manifest_path(&a.out), &[&a.out])
}

fn run(cli: &Cli, a: &RunArgs) -> CmdResult {
    let mut cfg = config(cli, Some(&a.config))?;
    if let Some(dir) = &a.out_dir {
        cfg.paths.out_dir = Some(dir.clone());
    }
    let (train_path, test_path, out_dir) = cfg.require_paths()?;
    let (train_path, test_path, out_dir): (PathBuf, PathBuf, PathBuf) =
        (train_path.into(), test_path.into(), out_dir.into());
    let train = load(&train_path)?;
    let test = test_rows(load(&test_path)?);
    let out = run_pipeline(&train, &test, &cfg)?;
    out.save(&out_dir)?;
    log::info!(
        "pooled fine-grain F1 {:.4}; per domain {:?}; outputs in {}",
        out.report.pooled_fine_grain,
        out.report.per_domain,
        out_dir.display()
    );
    let mut m = CommandManifest::new("run", &cfg, cfg.seeds());
    m.input(&a.config)?;
    m.input(&train_path)?;
    m.input(&test_path)?;
    let report = out_dir.join("report.json");
    let ckpt = out_dir.join("model.ckpt");
    m.finish(&out_dir.join("run.manifest.json"), &[&report, &ckpt])
}

fn explain(a: &ExplainArgs) -> CmdResult {
    if a.review_id.is_none() && a.wordcloud_dir.is_none() {
        return Err(CliError::Usage("give --review-id, --wordcloud-dir or both".into()));
    }
    let mut outs: Vec<&Path> = Vec::new();
    outs.extend(a.out.as_deref());
    outs.extend(a.heatmap.as_deref());
    ensure_distinct(&[&a.input], &outs)?;
    let artifacts = Artifacts::load(&a.artifacts)?;
    let d = load(&a.input)?;
    if let Some(id) = &a.review_id {
        let r = d
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("review `{id}` not found in {}", a.input.display())))?;
        let s = attention_saliency(r, &artifacts)?;
        let json = serde_json::to_string_pretty(&s).expect("saliency serializes");
        match &a.out {
            Some(p) => write_file(p, &(json + "\n"))?,
            None => {
                let mut stdout = std::io::stdout().lock();
                writeln!(stdout, "{json}").map_err(|e| io_err(Path::new("<stdout>"), e))?;
            }
        }
        if let Some(p) = &a.heatmap {
            export_heatmap(&s, p)?;
        }
    }
    if let Some(dir) = &a.wordcloud_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for domain in d.domains().iter().copied() {
            let items = d
                .iter()
                .filter(|r| r.domain == domain && r.label.is_suggestion())
                .map(|r| attention_saliency(r, &artifacts))
                .collect::<sugmine::Result<Vec<_>>>()?;
            if items.is_empty() {
                continue;
            }
            let sums = aggregate_saliency(&items, STOPWORDS);
            let path = dir.join(format!("wordcloud_{}.json", domain.as_str()));
            export_wordcloud_data(domain, WordCloudSource::Attention(&sums), &path)?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SageFile<'a> {
    domain: Domain,
    lambda: f64,
    iterations: usize,
    converged: bool,
    entries: &'a [sugmine::SageEntry],
}

fn sage(cli: &Cli, a: &SageArgs) -> CmdResult {
    let mut outs: Vec<&Path> = vec![&a.out];
    outs.extend(a.wordcloud.as_deref());
    ensure_distinct(&[&a.input], &outs)?;
    let cfg = config(cli, a.config.config.as_deref())?.explain;
    let mut sc = SageConfig::from(&cfg);
    if let Some(l) = a.lambda {
        sc.lambda = l;
    }
    let d = load(&a.input)?;
    let outcome = domain_sage(&d, a.domain, &sc)?;
    if !outcome.converged {
        return Err(Error::NotConverged {
            iters: outcome.iterations,
            last_delta: f64::NAN,
        }
        .into());
    }
    let mut entries = rank_entries(outcome.entries.clone(), a.by_magnitude || cfg.rank_by_magnitude);
    if let Some(k) = a.top_k {
        entries.truncate(k);
    }
    let file = SageFile {
        domain: a.domain,
        lambda: sc.lambda,
        iterations: outcome.iterations,
        converged: outcome.converged,
        entries: &entries,
    };
    write_file(&a.out, &(serde_json::to_string_pretty(&file).expect("sage serializes") + "\n"))?;
    if let Some(p) = &a.wordcloud {
        export_wordcloud_data(a.domain, WordCloudSource::Sage(&outcome.entries), p)?;
    }
    let mut m = CommandManifest::new("sage", &sc, BTreeMap::new());
    m.input(&a.input)?;
    m.finish(&manifest_path(&a.out), &outs)
}

fn generate_cmd(cli: &Cli, a: &GenerateArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_reviews: a.n_reviews,
        imbalance: a.imbalance,
        test_fraction: a.test_fraction,
        seed: cli.seed.unwrap_or(SynthConfig::default().seed),
        ..SynthConfig::default()
    };
    let d = generate(&cfg)?;
    d.save(&a.out, Format::from_path(&a.out))?;
    log::info!("generated {} reviews into {}", d.len(), a.out.display());
    let m = CommandManifest::new("generate", &cfg, seeds(&[("synth", cfg.seed)]));
    m.finish(&manifest_path(&a.out), &[&a.out])
}
