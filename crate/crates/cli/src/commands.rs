use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use labelrefine::evalmetrics::{auc, confusion, refinement_report, report_tsv, EvalRow};
use labelrefine::ganrefine::{refine_full_image, train_with, TRAIN_LOG_HEADER};
use labelrefine::patchmine::{pair_noise_seed, synth_sample};
use labelrefine::postproc::{connected_components, postprocess};
use labelrefine::raster::{load_image, load_label, load_prob, save_label, save_prob};
use labelrefine::tensornet::{checkpoint, NetRole, Network};
use labelrefine::{mine_patches, simulate_noise, Error, NoiseConfig, PatchPair};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::corpus::{
    create_corpus_dir, file_digest, load_clean, load_pair, pair_file, read_manifest, resolve, sha256_hex, write_clean,
    write_manifest, CorpusRow, MANIFEST,
};
use crate::UsageError;

pub const TRAIN_LOG: &str = "train_log.tsv";
pub const FINAL_GENERATOR: &str = "generator.lprf";
pub const METRICS: &str = "metrics.tsv";
pub const PROVENANCE: &str = "provenance.json";

/// Runs `f` over `items` on `jobs` workers; results keep input order.
fn par_map<T: Sync, U: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn provenance(command: &str, cfg: &PipelineConfig, inputs: Value) -> Value {
    json!({
        "tool": "labelrefine",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "inputs": inputs,
    })
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn synth(cfg: &PipelineConfig, out: &Path, jobs: usize) -> Result<()> {
    let s = &cfg.synth;
    if s.side < labelrefine::patchmine::MIN_SYNTH_SIDE {
        return Err(UsageError(format!(
            "synth.side must be at least {}",
            labelrefine::patchmine::MIN_SYNTH_SIDE
        ))
        .into());
    }
    create_corpus_dir(out)?;
    let seed = cfg.synth_seed();
    let idx: Vec<usize> = (0..s.count).collect();
    let rows = par_map(jobs, &idx, |&i| write_clean(out, i, "synth", &synth_sample(i, s.side, seed, &s.style)))?;
    write_manifest(out, &provenance("synth", cfg, json!({"synth_seed": seed})), &rows)?;
    eprintln!("synth: wrote {} patches to {}", rows.len(), out.display());
    Ok(())
}

struct MineEntry {
    image: PathBuf,
    annot1: PathBuf,
    annot2: PathBuf,
}

/// Input manifest: `image<TAB>annot1<TAB>annot2` per line, relative to the
/// manifest's directory; `#` lines and a leading `image` header are skipped.
fn read_mine_manifest(path: &Path) -> Result<Vec<MineEntry>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("image\t")) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [image, annot1, annot2] = f[..] else {
            bail!("{} line {}: expected image, annot1 and annot2 columns", path.display(), n + 1);
        };
        let entry = MineEntry {
            image: base.join(image),
            annot1: base.join(annot1),
            annot2: base.join(annot2),
        };
        for p in [&entry.image, &entry.annot1, &entry.annot2] {
            if !p.is_file() {
                return Err(anyhow!(Error::Io {
                    path: p.clone(),
                    source: std::io::ErrorKind::NotFound.into(),
                }));
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        bail!("{} lists no images", path.display());
    }
    Ok(entries)
}

pub fn mine(cfg: &PipelineConfig, out: &Path, input: &Path, jobs: usize) -> Result<()> {
    let entries = read_mine_manifest(input)?;
    let th = cfg.eval.label_threshold;
    let idx: Vec<usize> = (0..entries.len()).collect();
    let outcomes = par_map(jobs, &idx, |&i| {
        let e = &entries[i];
        let source = e.image.file_stem().map_or_else(|| format!("image{i}"), |s| s.to_string_lossy().into_owned());
        let image = load_image(&e.image)?;
        let a1 = load_label(&e.annot1, th)?;
        let a2 = load_label(&e.annot2, th)?;
        Ok((source.clone(), mine_patches(&source, i as u64, &image, &a1, &a2, &cfg.mine)?))
    })?;
    create_corpus_dir(out)?;
    let mut rows = Vec::new();
    for (source, o) in &outcomes {
        if o.shortfall > 0 {
            eprintln!(
                "warning: {source}: {} of {} patches missing after {} draws",
                o.shortfall, cfg.mine.patches_per_image, o.draws
            );
        }
        for p in &o.patches {
            rows.push(write_clean(out, rows.len(), source, p)?);
        }
    }
    write_manifest(out, &provenance("mine", cfg, json!({"input_manifest": file_digest(input)?})), &rows)?;
    eprintln!("mine: wrote {} patches to {}", rows.len(), out.display());
    Ok(())
}

pub fn simulate(cfg: &PipelineConfig, out: &Path, corpus: &Path, jobs: usize) -> Result<()> {
    let m = read_manifest(corpus)?;
    create_corpus_dir(out)?;
    let th = cfg.eval.label_threshold;
    let rows = par_map(jobs, &m.rows, |row| {
        let s = load_clean(corpus, row, th)?;
        let seed = pair_noise_seed(cfg.noise.seed, row.index);
        let (noisy, log) = simulate_noise(&s.label, &NoiseConfig { seed, ..cfg.noise.clone() })?;
        let mut r = write_clean(out, row.index, &row.source, &s)?;
        let noisy_rel = pair_file(row.index, "noisy");
        save_label(out.join(&noisy_rel), &noisy)?;
        r.noise_seed = Some(seed);
        r.noise_log = Some(log);
        r.noisy = Some(noisy_rel);
        Ok(r)
    })?;
    let inputs = json!({
        "corpus_manifest": file_digest(&corpus.join(MANIFEST))?,
        "corpus_provenance": m.provenance,
    });
    write_manifest(out, &provenance("simulate", cfg, inputs), &rows)?;
    eprintln!("simulate: wrote {} pairs to {}", rows.len(), out.display());
    Ok(())
}

fn load_pairs(dir: &Path, cfg: &PipelineConfig, jobs: usize) -> Result<Vec<PatchPair>> {
    let m = read_manifest(dir)?;
    par_map(jobs, &m.rows, |r| load_pair(dir, r, cfg.eval.label_threshold))
}

fn epoch_file(epoch: usize, role: &str) -> String {
    format!("checkpoints/epoch_{epoch:03}_{role}.lprf")
}

pub fn train(cfg: &PipelineConfig, out: &Path, corpus: &Path, holdout: Option<&Path>, jobs: usize) -> Result<()> {
    let pairs = load_pairs(corpus, cfg, jobs)?;
    if pairs.is_empty() {
        bail!("{} holds no training pairs", corpus.display());
    }
    let held = match holdout {
        Some(h) => load_pairs(h, cfg, jobs)?,
        None => Vec::new(),
    };
    ensure_dir(&out.join("checkpoints"))?;
    let mut inputs = json!({"corpus_manifest": file_digest(&corpus.join(MANIFEST))?});
    if let Some(h) = holdout {
        inputs["holdout_manifest"] = json!(file_digest(&h.join(MANIFEST))?);
    }
    write_json(&out.join(PROVENANCE), &provenance("train", cfg, inputs))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = format!("{TRAIN_LOG_HEADER}\n");
    fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    let result = train_with(&pairs, &held, &cfg.refine, &cfg.postproc, |rec, t| {
        checkpoint::save(out.join(epoch_file(rec.epoch, "generator")), &t.gen, Some(&t.gen_opt))?;
        checkpoint::save(out.join(epoch_file(rec.epoch, "discriminator")), &t.disc, Some(&t.disc_opt))?;
        log.push_str(&rec.tsv_row());
        log.push('\n');
        fs::write(&log_path, &log).map_err(|source| Error::Io {
            path: log_path.clone(),
            source,
        })?;
        eprintln!("epoch {}: {}", rec.epoch, rec.tsv_row());
        Ok(())
    });
    let (trainer, _) = result?;
    checkpoint::save(out.join(FINAL_GENERATOR), &trainer.gen, Some(&trainer.gen_opt))?;
    Ok(())
}

fn load_generator(path: &Path) -> Result<Network<f32>> {
    let (net, _) = checkpoint::load::<f32>(path)?;
    match net.role() {
        NetRole::Generator { .. } => Ok(net),
        NetRole::Discriminator => bail!("{} holds a discriminator, not a generator", path.display()),
    }
}

/// Largest square tile the generator accepts inside a `w × h` image.
fn default_tile(depth: usize, w: usize, h: usize) -> usize {
    let m = 1usize << depth;
    w.min(h) / m * m
}

const REFINED_MAGIC: &str = "# labelrefine refined v1";
const REFINED_COLUMNS: &str =
    "index\tpatch_id\tinput\tthreshold\tsplit_bin\tcomponents\tremoved_components\tremoved_pixels\tprob\tbin";

pub fn prob_file(index: usize) -> String {
    format!("{index:05}_prob.png")
}

pub fn bin_file(index: usize) -> String {
    format!("{index:05}_bin.png")
}

pub fn refine(cfg: &PipelineConfig, out: &Path, checkpoint_path: &Path, corpus: &Path, jobs: usize) -> Result<()> {
    let gen = load_generator(checkpoint_path)?;
    let NetRole::Generator { depth } = gen.role() else { unreachable!() };
    let m = read_manifest(corpus)?;
    ensure_dir(out)?;
    let n_iters = cfg.inference.n_iters.unwrap_or(cfg.refine.n_iters);
    let th = cfg.eval.label_threshold;
    let lines = par_map(jobs, &m.rows, |row: &CorpusRow| {
        let image = load_image(resolve(corpus, &row.img)?)?;
        let (input, rel) = match &row.noisy {
            Some(n) => ("noisy", n),
            None => ("clean", &row.clean),
        };
        let label = load_label(resolve(corpus, rel)?, th)?;
        let tile = cfg.inference.tile.unwrap_or_else(|| default_tile(depth, image.width(), image.height()));
        let prob = refine_full_image(&gen, &image, &label, n_iters, tile, cfg.inference.overlap)?.quantized();
        let (otsu, bin) = postprocess(&prob, &cfg.postproc)?;
        let min = cfg.postproc.min_size_for(prob.width(), prob.height());
        let cc = connected_components(&otsu.binary, cfg.postproc.connectivity);
        let small: Vec<usize> = cc.sizes.iter().copied().filter(|&s| s < min).collect();
        save_prob(out.join(prob_file(row.index)), &prob)?;
        save_label(out.join(bin_file(row.index)), &bin)?;
        Ok(format!(
            "{:05}\t{}\t{input}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}",
            row.index,
            row.patch_id,
            otsu.threshold,
            otsu.split_bin.map_or_else(|| "-".to_string(), |b| b.to_string()),
            cc.count,
            small.len(),
            small.iter().sum::<usize>(),
            prob_file(row.index),
            bin_file(row.index)
        ))
    })?;
    let inputs = json!({
        "checkpoint_sha256": file_digest(checkpoint_path)?,
        "corpus_manifest": file_digest(&corpus.join(MANIFEST))?,
        "n_iters": n_iters,
    });
    let prov = provenance("refine", cfg, inputs);
    let mut text = format!("{REFINED_MAGIC}\n# provenance {prov}\n{REFINED_COLUMNS}\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(out.join(MANIFEST), text).with_context(|| format!("writing {}", out.join(MANIFEST).display()))?;
    eprintln!("refine: wrote {} maps to {}", m.rows.len(), out.display());
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig, out: &Path, corpus: &Path, refined: &Path, jobs: usize) -> Result<()> {
    let m = read_manifest(corpus)?;
    ensure_dir(out)?;
    let th = cfg.eval.label_threshold;
    let rows = par_map(jobs, &m.rows, |row| {
        let clean = load_label(resolve(corpus, &row.clean)?, th)?;
        let pred = load_label(refined.join(bin_file(row.index)), th)?;
        let counts = confusion(&pred, &clean, None)?;
        let prob_path = refined.join(prob_file(row.index));
        let auc = if prob_path.is_file() {
            match auc(&load_prob(&prob_path)?, &clean, None) {
                Ok(a) => Some(a),
                Err(Error::SingleClass) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        let refinement = match &row.noisy {
            Some(n) => Some(refinement_report(&clean, &load_label(resolve(corpus, n)?, th)?, &pred)?),
            None => None,
        };
        Ok(EvalRow {
            id: row.patch_id.clone(),
            counts,
            auc,
            refinement,
        })
    })?;
    let report = report_tsv(&rows);
    fs::write(out.join(METRICS), &report).with_context(|| format!("writing {}", out.join(METRICS).display()))?;
    let refined_manifest = refined.join(MANIFEST);
    let inputs = json!({
        "corpus_manifest": file_digest(&corpus.join(MANIFEST))?,
        "refined_manifest": if refined_manifest.is_file() { json!(file_digest(&refined_manifest)?) } else { Value::Null },
        "metrics_sha256": sha256_hex(report.as_bytes()),
    });
    write_json(&out.join(PROVENANCE), &provenance("evaluate", cfg, inputs))?;
    if let Some(mean) = report.lines().last() {
        let _ = writeln!(std::io::stdout(), "{mean}");
    }
    Ok(())
}
