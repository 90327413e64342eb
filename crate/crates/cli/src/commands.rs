use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cilk_core::checkpoint::{load_engine, save_engine};
use cilk_core::decision::ThresholdVariant;
use cilk_core::eval::{self, Cell, EvalRun, StreamConfig};
use cilk_core::kb::{write_line, KnowledgeBase, Split};
use cilk_core::session::{Engine, InitConfig, SamplingStrategy, SessionConfig};
use cilk_core::sim::{build_world, SimWorld, WorldBuildConfig};
use cilk_core::wordnet::{self, ExtractConfig};
use clap::{Args, ValueEnum};

use crate::config::EngineConfig;

const WORDNET_NOTICE: &str = "\
# Derived from Princeton WordNet 3.x (synset pointers, WN18 relation names).
# WordNet Release 3.0 Copyright 2006 by Princeton University. All rights reserved.
# Permission to use, copy, modify and distribute this software and database and
# its documentation for any purpose and without fee or royalty is hereby granted,
# provided that you agree to comply with the following copyright notice and
# statements, including the disclaimer, and that the same appear on ALL copies of
# the software, database and documentation, including modifications that you make
# for internal use or for distribution.
# THIS SOFTWARE AND DATABASE IS PROVIDED \"AS IS\" AND PRINCETON UNIVERSITY MAKES NO
# REPRESENTATIONS OR WARRANTIES, EXPRESS OR IMPLIED. BY WAY OF EXAMPLE, BUT NOT
# LIMITATION, PRINCETON UNIVERSITY MAKES NO REPRESENTATIONS OR WARRANTIES OF
# MERCHANT-ABILITY OR FITNESS FOR ANY PARTICULAR PURPOSE OR THAT THE USE OF THE
# LICENSED SOFTWARE, DATABASE OR DOCUMENTATION WILL NOT INFRINGE ANY THIRD PARTY
# PATENTS, COPYRIGHTS, TRADEMARKS OR OTHER RIGHTS.
# The name of Princeton University or Princeton may not be used in advertising or
# publicity pertaining to distribution of the software and/or database. Title to
# copyright in this software, database and any associated documentation shall at
# all times remain with Princeton University and LICENSEE agrees to preserve same.
";

#[derive(Debug, Args)]
pub struct ImportWordnet {
    /// Directory holding data.noun, data.verb, data.adj and data.adv.
    #[arg(long)]
    pub dict: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub outer_core: usize,
    #[arg(long, default_value_t = 5000)]
    pub region: usize,
    #[arg(long, default_value_t = 3)]
    pub inner_core: usize,
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    /// Keep every triple instead of extracting a dense region.
    #[arg(long)]
    pub full: bool,
}

pub fn import_wordnet(args: &ImportWordnet, out: &mut dyn Write) -> Result<()> {
    let facts = wordnet::read_database(&args.dict)?;
    let kept = if args.full {
        facts
    } else {
        wordnet::extract(
            &facts,
            ExtractConfig {
                outer_core: args.outer_core,
                region_entities: args.region,
                inner_core: args.inner_core,
                seed: args.seed,
            },
        )
    };
    let kb = KnowledgeBase::from_facts(kept.iter().map(|f| (f, Split::Train)))?;
    let file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(WORDNET_NOTICE.as_bytes())?;
    for f in &kept {
        writeln!(w, "{}\t{}\t{}", f.head, f.relation, f.tail)?;
    }
    w.flush()?;
    writeln!(
        out,
        "wrote {}: {} triples, {} entities, {} relations",
        args.out.display(),
        kb.len(),
        kb.num_entities(),
        kb.num_relations()
    )?;
    for (rel, n) in wordnet::relation_histogram(&kept) {
        writeln!(out, "  {rel:<32} {n}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Wordnet,
    Nell,
}

#[derive(Debug, Args)]
pub struct BuildWorld {
    /// Original KB in the triple TSV format.
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Wordnet)]
    pub preset: Preset,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

pub fn cmd_build_world(args: &BuildWorld, out: &mut dyn Write) -> Result<()> {
    let original = KnowledgeBase::load(&args.kb)?;
    let cfg = match args.preset {
        Preset::Wordnet => WorldBuildConfig::wordnet(args.seed),
        Preset::Nell => WorldBuildConfig::nell(args.seed),
    };
    let world = build_world(&original, &cfg)?;
    world.save(&args.out)?;
    writeln!(
        out,
        "original KB: {} relations, {} entities, {} triples",
        original.num_relations(),
        original.num_entities(),
        original.len()
    )?;
    writeln!(out, "{}", world.summary())?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct InitTrain {
    #[arg(long)]
    pub world: PathBuf,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Overrides the configured number of initial epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn init_train(args: &InitTrain, out: &mut dyn Write) -> Result<()> {
    let cfg = EngineConfig::load_or_default(args.config.as_deref())?;
    let world = SimWorld::load(&args.world)?;
    let mut model = cfg.model;
    if let Some(d) = args.dim {
        model.dim = d;
    }
    let init = InitConfig {
        model,
        epochs: args.epochs.unwrap_or(cfg.init_epochs),
        seed: args.seed.unwrap_or(cfg.seed),
    };
    let start = Instant::now();
    let engine = Engine::initial_training(world.kb_base, init, cfg.session);
    save_engine(&args.out, &engine)?;
    let (train, valid) = engine.kb.split_counts();
    writeln!(
        out,
        "initial training: {train} train / {valid} valid triples, dim {}, {} epochs, {:.1}s",
        init.model.dim,
        init.epochs,
        start.elapsed().as_secs_f64()
    )?;
    writeln!(
        out,
        "diffident: {} entities, {} relations",
        engine.diffident.entities.len(),
        engine.diffident.relations.len()
    )?;
    Ok(())
}

/// Session-config overrides shared by evaluate and sweep.
#[derive(Debug, Args, Default)]
pub struct SessionOverrides {
    #[arg(long)]
    pub variant: Option<ThresholdVariant>,
    #[arg(long)]
    pub strategy: Option<SamplingStrategy>,
    #[arg(long)]
    pub clues: Option<usize>,
    #[arg(long)]
    pub facts: Option<usize>,
    /// Ask only about unknown symbols.
    #[arg(long)]
    pub no_perf_buffer: bool,
}

impl SessionOverrides {
    pub fn apply(&self, mut cfg: SessionConfig) -> SessionConfig {
        if let Some(v) = self.variant {
            cfg.threshold_variant = v;
        }
        if let Some(s) = self.strategy {
            cfg.sampling_strategy = s;
        }
        if let Some(c) = self.clues {
            cfg.max_clues = c;
        }
        if let Some(f) = self.facts {
            cfg.max_entity_facts = f;
        }
        if self.no_perf_buffer {
            cfg.use_performance_buffer = false;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for log.tsv and report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Stream-order seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub max_queries: Option<usize>,
    #[command(flatten)]
    pub overrides: SessionOverrides,
    /// Writes the engine state after the stream here.
    #[arg(long)]
    pub save_checkpoint: Option<PathBuf>,
}

fn write_run(dir: &Path, run: &EvalRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("log.tsv"))?);
    eval::write_log(&mut w, &run.log)?;
    w.flush()?;
    fs::write(dir.join("report.json"), run.report.to_json())?;
    Ok(())
}

pub fn evaluate(args: &Evaluate, out: &mut dyn Write) -> Result<()> {
    let world = SimWorld::load(&args.world)?;
    let mut engine = load_engine(&args.checkpoint)?;
    engine.set_config(args.overrides.apply(engine.config));
    let stream = StreamConfig {
        seed: args.seed,
        max_queries: args.max_queries,
    };
    let start = Instant::now();
    let run = eval::run_stream(&world, &mut engine, &stream);
    let elapsed = start.elapsed().as_secs_f64();
    write_run(&args.out, &run)?;
    if let Some(dir) = &args.save_checkpoint {
        save_engine(dir, &engine)?;
    }
    let label = format!("{}-{}", engine.config.threshold_variant, engine.config.sampling_strategy);
    write!(out, "{}", eval::format_table(&[(label, run.clone())]))?;
    if !run.log.is_empty() {
        eprintln!("mean {:.3}s per query", elapsed / run.log.len() as f64);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Thresholds,
    Strategies,
    Budgets,
    All,
}

#[derive(Debug, Args)]
pub struct Sweep {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Grid::All)]
    pub grid: Grid,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub max_queries: Option<usize>,
}

pub fn grid_cells(grid: Grid, base: SessionConfig) -> Vec<Cell> {
    match grid {
        Grid::Thresholds => eval::threshold_grid(base),
        Grid::Strategies => eval::strategy_grid(base),
        Grid::Budgets => eval::budget_grid(base),
        Grid::All => {
            let mut cells = eval::threshold_grid(base);
            for c in eval::strategy_grid(base).into_iter().chain(eval::budget_grid(base)) {
                if !cells.iter().any(|x| x.config == c.config) {
                    cells.push(c);
                }
            }
            cells
        }
    }
}

pub fn sweep(args: &Sweep, out: &mut dyn Write) -> Result<()> {
    let world = SimWorld::load(&args.world)?;
    let engine = load_engine(&args.checkpoint)?;
    let cells = grid_cells(args.grid, engine.config);
    if cells.is_empty() {
        bail!("empty grid");
    }
    let stream = StreamConfig {
        seed: args.seed,
        max_queries: args.max_queries,
    };
    let rows = eval::sweep(&world, &engine, &cells, &stream);
    for (label, run) in &rows {
        write_run(&args.out.join(sanitize(label)), run)?;
    }
    let table = eval::format_table(&rows);
    fs::write(args.out.join("table.txt"), &table)?;
    write!(out, "{table}")?;
    Ok(())
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Appends the triples of `kb` from index `from` on to a KB file.
pub fn append_triples(path: &Path, kb: &KnowledgeBase, from: usize) -> std::io::Result<()> {
    if from >= kb.len() {
        return Ok(());
    }
    let file = fs::OpenOptions::new().append(true).create(true).open(path)?;
    let mut w = BufWriter::new(file);
    for t in &kb.triples()[from..] {
        write_line(&mut w, &kb.fact(t), t.split)?;
    }
    w.flush()
}
