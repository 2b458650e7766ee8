//! Value resolution (flag > config file > default) and command execution.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ngm::analysis;
use ngm::bench::{self, BenchConfig, NgmMode, Phase};
use ngm::decoder::{Decoder, FeatureMode, NgmRunner, SamplerConfig, SamplerKind};
use ngm::ngram::{self, TokenId};
use ngm::{Fusion, NgmConfig, ToyDecoderConfig};
use serde::Serialize;

use crate::args::*;
use crate::config_file::FileConfig;

/// Process outcome buckets: usage/config problems exit 1, IO problems exit
/// 2, non-finite numerics exit 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ngm::Error> for CliError {
    fn from(e: ngm::Error) -> Self {
        use ngm::Error::*;
        match e {
            Io(_) | Format(_) => CliError::Io(e.to_string()),
            CorruptTable(_) | NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

pub struct Ctx {
    file: FileConfig,
}

impl Ctx {
    pub fn load(config_path: Option<&Path>) -> CliResult<Ctx> {
        let file = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Io(format!("config file {}: {e}", path.display()))
                })?;
                FileConfig::parse(&text)
                    .map_err(|e| CliError::Usage(format!("config file: {e}")))?
            }
            None => FileConfig::default(),
        };
        Ok(Ctx { file })
    }

    fn decoder_config(&self, args: &DecoderArgs) -> ToyDecoderConfig {
        let d = self.file.decoder.clone().unwrap_or_default();
        let base = ToyDecoderConfig::default();
        ToyDecoderConfig {
            num_layers: args.num_layers.or(d.num_layers).unwrap_or(base.num_layers),
            dim: args.dim.or(d.dim).unwrap_or(base.dim),
            num_heads: args.num_heads.or(d.num_heads).unwrap_or(base.num_heads),
            vocab_size: args.vocab_size.or(d.vocab_size).unwrap_or(base.vocab_size),
            max_context: args.max_context.or(d.max_context).unwrap_or(base.max_context),
            seed: args.decoder_seed.or(d.seed).unwrap_or(base.seed),
            tied_embeddings: args.tied.or(d.tied_embeddings).unwrap_or(base.tied_embeddings),
        }
    }

    fn load_decoder(&self, args: &DecoderArgs) -> CliResult<Decoder> {
        let checkpoint = args
            .checkpoint
            .clone()
            .or_else(|| self.file.paths.as_ref().and_then(|p| p.checkpoint.clone()));
        match checkpoint {
            Some(dir) => Ok(Decoder::load_checkpoint(dir)?),
            None => Ok(Decoder::init(self.decoder_config(args))?),
        }
    }

    /// Resolved memory-module settings plus whether the module is enabled
    /// at all and how decode-time features are produced.
    fn ngm_settings(
        &self,
        args: &NgmArgs,
        num_layers: usize,
    ) -> CliResult<(bool, NgmConfig, FeatureMode)> {
        let section = self.file.ngm.clone().unwrap_or_default();
        let enabled = match args.ngm.as_deref() {
            Some("on") => true,
            Some("off") => false,
            Some(other) => {
                return Err(CliError::Usage(format!("--ngm takes on/off, got {other:?}")))
            }
            None => section.enabled.unwrap_or(true),
        };

        let defaults = NgmConfig::for_depth(num_layers);
        let sizes = match &args.ngram_sizes {
            Some(text) => parse_usize_list(text, "--ngram-sizes")?,
            None => section.sizes.clone().unwrap_or(defaults.sizes),
        };
        let output_scale = args
            .scale
            .or(section.output_scale)
            .unwrap_or(defaults.output_scale);
        let use_relu = if args.relu {
            true
        } else if args.no_relu {
            false
        } else {
            section.use_relu.unwrap_or(defaults.use_relu)
        };
        let fusion = match args.fusion.as_deref().or(section.fusion.as_deref()) {
            Some(text) => text.parse::<Fusion>()?,
            None => defaults.fusion,
        };
        let injection_layers: BTreeSet<usize> = match &args.layers {
            Some(text) => parse_usize_list(text, "--layers")?.into_iter().collect(),
            None => section
                .injection_layers
                .clone()
                .map(|v| v.into_iter().collect())
                .unwrap_or(defaults.injection_layers),
        };

        let comptok_path = args
            .comptok
            .clone()
            .or_else(|| self.file.paths.as_ref().and_then(|p| p.comptok.clone()));
        let compressed_map = match comptok_path {
            Some(path) => Some(load_comptok(&path)?),
            None => None,
        };
        let mask_path = args
            .mask
            .clone()
            .or_else(|| self.file.paths.as_ref().and_then(|p| p.mask.clone()));
        let text_mask = match mask_path {
            Some(path) => Some(parse_mask(&std::fs::read_to_string(&path)?)?),
            None => None,
        };

        let config = NgmConfig {
            sizes,
            output_scale,
            use_relu,
            fusion,
            injection_layers,
            compressed_map,
            text_mask,
        };
        config.validate()?;

        let mode = match args.ngm_mode.as_deref().or(section.mode.as_deref()) {
            None | Some("streaming") => FeatureMode::Streaming,
            Some("recompute") => FeatureMode::Recompute,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "--ngm-mode takes streaming/recompute, got {other:?}"
                )))
            }
        };
        Ok((enabled, config, mode))
    }

    fn sampler_config(&self, args: &SamplerArgs) -> CliResult<SamplerConfig> {
        let section = self.file.sampler.clone().unwrap_or_default();
        let base = SamplerConfig::default();
        let kind = match args.sampler.as_deref().or(section.kind.as_deref()) {
            None => base.kind,
            Some("greedy") => SamplerKind::Greedy,
            Some("sample") => SamplerKind::Sample,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "--sampler takes greedy/sample, got {other:?}"
                )))
            }
        };
        Ok(SamplerConfig {
            kind,
            temperature: args.temperature.or(section.temperature).unwrap_or(base.temperature),
            top_p: args.top_p.or(section.top_p).unwrap_or(base.top_p),
            top_k: args.top_k.or(section.top_k).unwrap_or(base.top_k),
            seed: args.seed.or(section.seed).unwrap_or(base.seed),
        })
    }

    fn seed(&self, flag: Option<u64>, pick: fn(&crate::config_file::SeedsSection) -> Option<u64>) -> u64 {
        flag.or_else(|| self.file.seeds.as_ref().and_then(pick)).unwrap_or(0)
    }

    fn path(
        &self,
        flag: Option<PathBuf>,
        pick: fn(&crate::config_file::PathsSection) -> Option<PathBuf>,
    ) -> Option<PathBuf> {
        flag.or_else(|| self.file.paths.as_ref().and_then(pick))
    }
}

fn parse_usize_list(text: &str, what: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("{what}: bad integer {tok:?}")))
        })
        .collect()
}

pub fn parse_ids(text: &str) -> CliResult<Vec<TokenId>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<TokenId>()
                .map_err(|_| CliError::Usage(format!("bad token id {tok:?}")))
        })
        .collect()
}

fn parse_mask(text: &str) -> CliResult<Vec<bool>> {
    text.split_whitespace()
        .map(|tok| match tok {
            "1" | "true" | "t" => Ok(true),
            "0" | "false" | "f" => Ok(false),
            other => Err(CliError::Usage(format!("bad mask entry {other:?}"))),
        })
        .collect()
}

fn load_comptok(path: &Path) -> CliResult<ngram::CompressedTokenMap> {
    let text = std::fs::read_to_string(path)?;
    let (entries, marker) = ngram::parse_vocab(&text)?;
    Ok(ngram::build_compressed_map(&entries, marker)?)
}

fn load_ids_arg(
    inline: &Option<String>,
    file: &Option<PathBuf>,
    what: &str,
) -> CliResult<Vec<TokenId>> {
    match (inline, file) {
        (Some(text), _) => parse_ids(text),
        (None, Some(path)) => parse_ids(&std::fs::read_to_string(path)?),
        (None, None) => Err(CliError::Usage(format!("missing {what}"))),
    }
}

fn make_runner(
    enabled: bool,
    config: &NgmConfig,
    mode: FeatureMode,
    num_layers: usize,
) -> CliResult<Option<NgmRunner>> {
    if !enabled {
        return Ok(None);
    }
    Ok(Some(NgmRunner::from_config(config.clone(), num_layers, mode)?))
}

pub fn cmd_init(ctx: &Ctx, args: &InitArgs) -> CliResult<()> {
    let decoder = ctx.load_decoder(&args.decoder)?;
    let out = ctx
        .path(args.out.clone(), |p| p.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("init needs --out (or paths.checkpoint)".into()))?;
    decoder.save_checkpoint(&out)?;
    if let Some(table_path) = &args.export_table {
        ngm::io::write_table(table_path, decoder.embedding_table())?;
    }
    println!(
        "checkpoint written to {} ({} layers, dim {}, vocab {})",
        out.display(),
        decoder.config().num_layers,
        decoder.config().dim,
        decoder.config().vocab_size
    );
    Ok(())
}

pub fn cmd_encode(ctx: &Ctx, args: &EncodeArgs) -> CliResult<()> {
    let table_path = ctx
        .path(args.table.clone(), |p| p.table.clone())
        .ok_or_else(|| CliError::Usage("encode needs --table (or paths.table)".into()))?;
    let table = ngm::io::read_table_auto(&table_path)?;
    let ids = load_ids_arg(&args.ids, &args.ids_file, "--ids or --ids-file")?;

    let sizes = match &args.ngram_sizes {
        Some(text) => parse_usize_list(text, "--ngram-sizes")?,
        None => ctx
            .file
            .ngm
            .as_ref()
            .and_then(|n| n.sizes.clone())
            .unwrap_or_else(|| vec![2, 3]),
    };
    let effective_ids = match ctx.path(args.comptok.clone(), |p| p.comptok.clone()) {
        Some(path) => ngram::apply_compressed_map(&ids, &load_comptok(&path)?),
        None => ids.clone(),
    };
    let mask = match ctx.path(args.mask.clone(), |p| p.mask.clone()) {
        Some(path) => Some(parse_mask(&std::fs::read_to_string(&path)?)?),
        None => None,
    };
    let stack = ngram::encode_causal_ngrams(&effective_ids, &table, &sizes, mask.as_deref())?;

    let sizes_text: Vec<String> = stack.sizes().iter().map(|n| n.to_string()).collect();
    println!(
        "stack positions={} scales={} dim={} sizes={}",
        stack.len(),
        stack.num_scales(),
        stack.dim(),
        sizes_text.join(",")
    );
    match &args.out {
        Some(path) => {
            ngm::io::write_stack(path, &stack)?;
            println!("dump written to {}", path.display());
        }
        None => {
            for t in 0..stack.len() {
                let norms: Vec<String> = (0..stack.num_scales())
                    .map(|i| {
                        let g = stack.vector(t, i);
                        let norm =
                            g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                        format!("{norm:.6}")
                    })
                    .collect();
                println!("pos {t}: |g| = {}", norms.join(" "));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceHeader<'a> {
    decoder: &'a ToyDecoderConfig,
    ngm: Option<&'a NgmConfig>,
    ngm_mode: String,
    sampler: &'a SamplerConfig,
}

#[derive(Serialize)]
struct Trace<'a> {
    config: TraceHeader<'a>,
    prompt: &'a [TokenId],
    generated: &'a [TokenId],
}

pub fn cmd_generate(ctx: &Ctx, args: &GenerateArgs) -> CliResult<()> {
    let decoder = ctx.load_decoder(&args.decoder)?;
    let (enabled, ngm_config, mode) =
        ctx.ngm_settings(&args.ngm, decoder.config().num_layers)?;
    let sampler = ctx.sampler_config(&args.sampler)?;
    let prompt = load_ids_arg(&args.prompt, &args.prompt_file, "--prompt or --prompt-file")?;
    let max_new = args.max_new.unwrap_or(32);

    let mut runner = make_runner(enabled, &ngm_config, mode, decoder.config().num_layers)?;
    let generated = decoder.generate(&prompt, max_new, &sampler, runner.as_mut())?;

    let text: Vec<String> = generated.iter().map(|t| t.to_string()).collect();
    println!("{}", text.join(" "));

    if let Some(path) = &args.trace {
        let trace = Trace {
            config: TraceHeader {
                decoder: decoder.config(),
                ngm: enabled.then_some(&ngm_config),
                ngm_mode: match mode {
                    FeatureMode::Streaming => "streaming".into(),
                    FeatureMode::Recompute => "recompute".into(),
                },
                sampler: &sampler,
            },
            prompt: &prompt,
            generated: &generated,
        };
        let json = serde_json::to_string_pretty(&trace)
            .map_err(|e| CliError::Io(format!("trace encode: {e}")))?;
        std::fs::write(path, json + "\n")?;
    }
    Ok(())
}

pub fn cmd_analyze_align(ctx: &Ctx, args: &AnalyzeAlignArgs) -> CliResult<()> {
    let decoder = ctx.load_decoder(&args.decoder)?;
    let (_, ngm_config, _) = ctx.ngm_settings(&args.ngm, decoder.config().num_layers)?;
    let control_seed = ctx.seed(args.control_seed, |s| s.control);
    let corpus = match ctx.path(args.corpus.clone(), |p| p.corpus.clone()) {
        Some(path) => read_corpus(&path)?,
        None => {
            let corpus_seed = ctx.seed(args.corpus_seed, |s| s.corpus);
            analysis::synthetic_corpus(
                decoder.config().vocab_size,
                args.synth_sequences.unwrap_or(8),
                args.synth_len.unwrap_or(64),
                corpus_seed,
            )
        }
    };
    let profile = analysis::alignment_profile(&decoder, &corpus, &ngm_config, control_seed)?;

    match &args.out {
        Some(path) => {
            analysis::export_report_json(&profile, path)?;
            println!("alignment report written to {}", path.display());
        }
        None => {
            for (l, ((a, s), r)) in profile
                .series
                .actual
                .iter()
                .zip(&profile.series.shuffled)
                .zip(&profile.series.random)
                .enumerate()
            {
                println!("layer {l}: actual={a} shuffled={s} random={r}");
            }
        }
    }
    println!(
        "ordering actual>shuffled>random holds at {}/{} layers",
        profile
            .summary
            .ordering_per_layer
            .iter()
            .filter(|&&b| b)
            .count(),
        profile.summary.ordering_per_layer.len()
    );
    Ok(())
}

pub fn cmd_analyze_locality(ctx: &Ctx, args: &AnalyzeLocalityArgs) -> CliResult<()> {
    let decoder = ctx.load_decoder(&args.decoder)?;
    let (_, ngm_config, _) = ctx.ngm_settings(&args.ngm, decoder.config().num_layers)?;
    let sample = match (&args.sample, &args.sample_file) {
        (None, None) => {
            let corpus_seed = ctx.seed(args.corpus_seed, |s| s.corpus);
            analysis::synthetic_corpus(
                decoder.config().vocab_size,
                1,
                args.synth_len.unwrap_or(48),
                corpus_seed,
            )
            .remove(0)
        }
        _ => load_ids_arg(&args.sample, &args.sample_file, "--sample")?,
    };
    let layer = args.layer.unwrap_or_else(|| {
        ngm_config.injection_layers.iter().copied().next().unwrap_or(0)
    });
    let report = analysis::locality_matrix(&decoder, &sample, &ngm_config, layer)?;

    if let Some(path) = &args.out {
        analysis::export_report_json(&report, path)?;
        println!("locality report written to {}", path.display());
    }
    if let Some(path) = &args.csv {
        analysis::export_matrix_csv(&report, path)?;
        println!("matrix csv written to {}", path.display());
    }
    println!(
        "layer {layer}: diag_mean={} offdiag_mean={} ratio={}",
        report.summary.diag_mean,
        report.summary.offdiag_mean,
        report
            .summary
            .ratio
            .map_or("n/a".to_string(), |r| r.to_string())
    );
    Ok(())
}

fn read_corpus(path: &Path) -> CliResult<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path)?;
    let mut corpus = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        corpus.push(parse_ids(line)?);
    }
    Ok(corpus)
}

pub fn cmd_bench(ctx: &Ctx, phase: Phase, args: &BenchArgs) -> CliResult<()> {
    let decoder = ctx.load_decoder(&args.decoder)?;
    let (_, ngm_config, _) = ctx.ngm_settings(&args.ngm, decoder.config().num_layers)?;
    let defaults = BenchConfig::default();
    let modes = match &args.mode {
        Some(text) => text
            .split(',')
            .map(|m| m.trim().parse::<NgmMode>())
            .collect::<Result<Vec<_>, _>>()?,
        None => defaults.modes,
    };
    let config = BenchConfig {
        prompt_lengths: match &args.lengths {
            Some(text) => parse_usize_list(text, "--lengths")?,
            None => defaults.prompt_lengths,
        },
        runs_per_point: args.runs.unwrap_or(defaults.runs_per_point),
        warmup_runs: args.warmup.unwrap_or(defaults.warmup_runs),
        decode_tokens: args.decode_tokens.unwrap_or(defaults.decode_tokens),
        modes,
        prompt_seed: ctx.seed(args.prompt_seed, |s| s.prompt),
    };

    let rows = match phase {
        Phase::Prefill => bench::bench_prefill(&decoder, &config, &ngm_config)?,
        Phase::Decode => bench::bench_decode(&decoder, &config, &ngm_config)?,
    };
    let report = bench::build_report(&decoder, &config, &ngm_config, rows);
    bench::emit_bench_report(&report, args.out.as_deref(), args.csv.as_deref())?;

    for s in &report.summary {
        println!(
            "{} {} len={} mean_us={:.1} std_us={:.1} ngm_ops={:.0} overhead={}",
            s.phase,
            s.mode,
            s.prompt_len,
            s.mean_us,
            s.std_us,
            s.mean_ngm_ops,
            s.overhead
                .map_or("n/a".to_string(), |o| format!("{:.4}", o))
        );
    }
    if let Some(path) = &args.out {
        println!("bench report written to {}", path.display());
    }
    if let Some(path) = &args.csv {
        println!("bench csv written to {}", path.display());
    }
    Ok(())
}
