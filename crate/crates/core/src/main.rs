use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fewshot_persona::checkpoint::Checkpoint;
use fewshot_persona::corpus::{similarity_diagnostics, Corpus, Split};
use fewshot_persona::harness::{self, Preset, RunConfig};
use fewshot_persona::meta::{Mode, NeighborPolicy};
use serde::Serialize;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fewshot-persona", version, about = "Few-shot personalized response generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus into a directory.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train and write checkpoints plus a metrics stream.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt to every speaker of a split and score the generations.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate each variant for each seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Variants to run; all of them when omitted.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<Mode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Neighbor-versus-random similarity of learned task embeddings.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory written by gen-data; generated in memory otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    max_speakers: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Compact,
    FullScale,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    TrainOnly,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

impl RunArgs {
    fn config(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut c = match (&self.config, base) {
            (Some(p), _) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            (None, Some(b)) => b,
            (None, None) => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.data_seed {
            c.data_seed = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.mode {
            c.meta.mode = v;
        }
        if let Some(v) = self.preset {
            c.model.preset = match v {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Compact => Preset::Compact,
                PresetArg::FullScale => Preset::FullScale,
            };
        }
        if let Some(v) = self.policy {
            c.meta.neighbor_policy = match v {
                PolicyArg::TrainOnly => NeighborPolicy::TrainOnly,
                PolicyArg::All => NeighborPolicy::All,
            };
        }
        if self.max_speakers.is_some() {
            c.eval.max_speakers = self.max_speakers;
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn corpus(&self, cfg: &RunConfig) -> Result<(Corpus, String)> {
        let corpus = match &self.data {
            Some(dir) => Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))?,
            None => cfg.data.generate(cfg.data_seed)?.corpus,
        };
        let hash = corpus.content_hash()?;
        Ok((corpus, hash))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_checkpoint(path: &Path, run: &RunArgs) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let stored: RunConfig = serde_json::from_value(ck.config.clone()).context("checkpoint run configuration")?;
    let cfg = run.config(Some(stored))?;
    Ok((ck, cfg))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData { run, out } => {
            let cfg = run.config(None)?;
            let synth = cfg.data.generate(cfg.data_seed)?;
            let hash = synth.corpus.save(&out)?;
            let diag = similarity_diagnostics(&synth.corpus, &mut harness::stream(cfg.data_seed, 7));
            println!("dataset hash {hash}");
            println!("{}", serde_json::to_string(&diag)?);
        }
        Cmd::Train { run, out } => {
            let cfg = run.config(None)?;
            let (corpus, hash) = run.corpus(&cfg)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let mut metrics = BufWriter::new(fs::File::create(out.join("metrics.jsonl"))?);
            let every = cfg.checkpoint_every;
            let (state, summary) = harness::train(&corpus, &cfg, &mut |m, st| {
                serde_json::to_writer(&mut metrics, m)?;
                metrics.write_all(b"\n").map_err(fewshot_persona::error::Error::from)?;
                if every > 0 && m.metrics.step % every as u64 == 0 {
                    harness::checkpoint(st, &cfg, &hash).save(&out.join(format!("step-{}.json", m.metrics.step)))?;
                }
                if m.metrics.step % 100 == 0 {
                    log::info!("step {} query loss {:.4}", m.metrics.step, m.metrics.mean_query_loss);
                }
                Ok(())
            })?;
            metrics.flush()?;
            harness::checkpoint(&state, &cfg, &hash).save(&out.join("final.json"))?;
            write_json(&out.join("summary.json"), &summary)?;
            println!(
                "trained {} steps in {:.1}s, query loss {:.4} -> {:.4}",
                summary.steps, summary.wall_secs, summary.first_window, summary.last_window
            );
        }
        Cmd::Eval { run, checkpoint, split, out } => {
            let (ck, cfg) = load_checkpoint(&checkpoint, &run)?;
            let (corpus, hash) = run.corpus(&cfg)?;
            harness::check_dataset(&ck, &hash)?;
            let state = ck.to_state()?;
            let ev = harness::evaluate(&state, &corpus, &cfg, split.into())?;
            if ev.checksum_before != ev.checksum_after {
                bail!("evaluation changed the global parameters");
            }
            println!("{}", ev.report);
            println!("query loss before adaptation {:.4}, after {:.4}", ev.mean_pre_loss, ev.mean_post_loss);
            if let Some(out) = out {
                write_json(&out, &ev)?;
            }
        }
        Cmd::Ablate { run, seeds, modes, out } => {
            let cfg = run.config(None)?;
            let (corpus, _) = run.corpus(&cfg)?;
            let modes = if modes.is_empty() { Mode::ALL.to_vec() } else { modes };
            fs::create_dir_all(&out)?;
            let mut rows_out = BufWriter::new(fs::File::create(out.join("ablation.jsonl"))?);
            let mut io_err = None;
            let rows = harness::ablate(&corpus, &cfg, &modes, &seeds, &mut |row| {
                log::info!("finished {} seed {}", row.mode, row.seed);
                let res = serde_json::to_writer(&mut rows_out, row)
                    .map_err(anyhow::Error::from)
                    .and_then(|_| rows_out.write_all(b"\n").map_err(anyhow::Error::from));
                if let Err(e) = res {
                    io_err.get_or_insert(e);
                }
            });
            if let Some(e) = io_err {
                return Err(e);
            }
            rows_out.flush()?;
            let table = harness::ablation_table(&rows)?;
            fs::write(out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Cmd::Probe { run, checkpoint } => {
            let (ck, cfg) = load_checkpoint(&checkpoint, &run)?;
            let (corpus, hash) = run.corpus(&cfg)?;
            harness::check_dataset(&ck, &hash)?;
            let state = ck.to_state()?;
            let rows = harness::probe_train(&state, &corpus, &cfg)?;
            let ev = harness::evaluate(&state, &corpus, &cfg, Split::Test)?;
            let show = |name: &str, g: &fewshot_persona::metrics::GammaProbe| {
                let cells: Vec<String> = g
                    .margins
                    .iter()
                    .zip(&g.ratios)
                    .map(|(m, r)| format!("γ_{m} = {r:.3}"))
                    .collect();
                println!("{name:<28} {} over {} speakers", cells.join("  "), g.speakers);
            };
            show("training speakers", &rows);
            if let Some(g) = &ev.gamma {
                show("refined test representations", g);
            }
            show("support-only embeddings", &ev.comparator_gamma);
        }
    }
    Ok(())
}
