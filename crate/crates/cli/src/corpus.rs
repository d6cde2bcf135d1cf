//! On-disk corpus: `pairs/NNNNN_{img,clean,noisy}.png` plus `manifest.tsv`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use labelrefine::morphnoise::{CellRecord, NoiseLog, NoiseOp};
use labelrefine::patchmine::Provenance;
use labelrefine::raster::{load_image, load_label, save_image, save_label};
use labelrefine::{CleanSample, PatchPair, PatchRect};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.tsv";
pub const PAIRS_DIR: &str = "pairs";
const MAGIC_LINE: &str = "# labelrefine corpus v1";
const PROVENANCE_PREFIX: &str = "# provenance ";
const COLUMNS: [&str; 10] = [
    "index", "patch_id", "source", "rect", "noise_seed", "ops", "drawn", "img", "clean", "noisy",
];
const NONE: &str = "-";

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRow {
    pub index: usize,
    pub patch_id: String,
    pub source: String,
    pub rect: Option<PatchRect>,
    pub noise_seed: Option<u64>,
    pub noise_log: Option<NoiseLog>,
    pub img: String,
    pub clean: String,
    pub noisy: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn pair_file(index: usize, kind: &str) -> String {
    format!("{PAIRS_DIR}/{index:05}_{kind}.png")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| NONE.to_string(), T::to_string)
}

fn rect_str(r: &Option<PatchRect>) -> String {
    r.map_or_else(|| NONE.to_string(), |r| format!("{},{},{}", r.x0, r.y0, r.side))
}

fn parse_rect(s: &str) -> Result<Option<PatchRect>> {
    if s == NONE {
        return Ok(None);
    }
    let v: Vec<usize> = s.split(',').map(str::parse).collect::<Result<_, _>>().map_err(|_| anyhow!("bad rect {s:?}"))?;
    match v[..] {
        [x0, y0, side] => Ok(Some(PatchRect::new(x0, y0, side))),
        _ => bail!("bad rect {s:?}"),
    }
}

fn parse_ops(s: &str) -> Result<Vec<NoiseOp>> {
    s.chars()
        .map(|c| NoiseOp::from_code(c).ok_or_else(|| anyhow!("unknown op code {c:?}")))
        .collect()
}

fn parse_log(applied: &str, drawn: &str) -> Result<Option<NoiseLog>> {
    if applied == NONE {
        return Ok(None);
    }
    let a = parse_ops(applied)?;
    let d = if drawn == NONE { a.clone() } else { parse_ops(drawn)? };
    if a.len() != d.len() {
        bail!("op logs differ in length");
    }
    Ok(Some(NoiseLog {
        cells: d.into_iter().zip(a).map(|(drawn, applied)| CellRecord { drawn, applied }).collect(),
    }))
}

/// Writes the manifest. `provenance` goes into a comment header so every
/// corpus records how it was produced.
pub fn write_manifest(dir: &Path, provenance: &Value, rows: &[CorpusRow]) -> Result<()> {
    let mut s = format!("{MAGIC_LINE}\n{PROVENANCE_PREFIX}{provenance}\n{}\n", COLUMNS.join("\t"));
    for r in rows {
        let (ops, drawn) = match &r.noise_log {
            Some(log) => {
                let applied = log.op_string();
                let drawn: String = log.cells.iter().map(|c| c.drawn.code()).collect();
                let drawn = if drawn == applied { NONE.to_string() } else { drawn };
                (applied, drawn)
            }
            None => (NONE.to_string(), NONE.to_string()),
        };
        let fields = [
            format!("{:05}", r.index),
            r.patch_id.clone(),
            r.source.clone(),
            rect_str(&r.rect),
            opt(&r.noise_seed),
            ops,
            drawn,
            r.img.clone(),
            r.clean.clone(),
            opt(&r.noisy),
        ];
        s.push_str(&fields.join("\t"));
        s.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

pub struct Manifest {
    pub provenance: Value,
    pub rows: Vec<CorpusRow>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC_LINE) {
        bail!("{} is not a corpus manifest", path.display());
    }
    let provenance = lines
        .next()
        .and_then(|l| l.strip_prefix(PROVENANCE_PREFIX))
        .ok_or_else(|| anyhow!("{}: missing provenance line", path.display()))?;
    let provenance: Value = serde_json::from_str(provenance).with_context(|| format!("{}: provenance", path.display()))?;
    if lines.next().map(|l| l.split('\t').collect::<Vec<_>>()) != Some(COLUMNS.to_vec()) {
        bail!("{}: unexpected column header", path.display());
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let ctx = || format!("{} row {}", path.display(), n + 1);
        if f.len() != COLUMNS.len() {
            bail!("{}: expected {} fields, got {}", ctx(), COLUMNS.len(), f.len());
        }
        rows.push(CorpusRow {
            index: f[0].parse().with_context(ctx)?,
            patch_id: f[1].to_string(),
            source: f[2].to_string(),
            rect: parse_rect(f[3]).with_context(ctx)?,
            noise_seed: if f[4] == NONE { None } else { Some(f[4].parse().with_context(ctx)?) },
            noise_log: parse_log(f[5], f[6]).with_context(ctx)?,
            img: f[7].to_string(),
            clean: f[8].to_string(),
            noisy: (f[9] != NONE).then(|| f[9].to_string()),
        });
    }
    Ok(Manifest { provenance, rows })
}

/// Resolves a manifest-relative path, refusing anything that escapes `dir`.
pub fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        bail!("manifest path {rel:?} must be relative to the corpus directory");
    }
    Ok(dir.join(p))
}

pub fn load_clean(dir: &Path, row: &CorpusRow, threshold: f32) -> Result<CleanSample> {
    Ok(CleanSample {
        id: row.patch_id.clone(),
        image: load_image(resolve(dir, &row.img)?)?,
        label: load_label(resolve(dir, &row.clean)?, threshold)?,
        rect: row.rect,
    })
}

pub fn load_pair(dir: &Path, row: &CorpusRow, threshold: f32) -> Result<PatchPair> {
    let noisy = row
        .noisy
        .as_ref()
        .ok_or_else(|| anyhow!("{}: entry {} has no noisy label; run `simulate` first", dir.display(), row.index))?;
    let clean = load_clean(dir, row, threshold)?;
    let noisy = load_label(resolve(dir, noisy)?, threshold)?;
    Ok(PatchPair::new(
        clean.image,
        clean.label,
        noisy,
        Provenance {
            source: row.patch_id.clone(),
            rect: row.rect,
            noise_seed: row.noise_seed.unwrap_or(0),
            noise_log: row.noise_log.clone().unwrap_or_default(),
        },
    )?)
}

/// Writes the image and clean label of a sample; returns its manifest row.
pub fn write_clean(dir: &Path, index: usize, source: &str, s: &CleanSample) -> Result<CorpusRow> {
    let row = CorpusRow {
        index,
        patch_id: s.id.clone(),
        source: source.to_string(),
        rect: s.rect,
        noise_seed: None,
        noise_log: None,
        img: pair_file(index, "img"),
        clean: pair_file(index, "clean"),
        noisy: None,
    };
    save_image(dir.join(&row.img), &s.image)?;
    save_label(dir.join(&row.clean), &s.label)?;
    Ok(row)
}

pub fn create_corpus_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(PAIRS_DIR)).with_context(|| format!("creating {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = NoiseLog {
            cells: vec![
                CellRecord { drawn: NoiseOp::Erode, applied: NoiseOp::Erode },
                CellRecord { drawn: NoiseOp::Open, applied: NoiseOp::Identity },
            ],
        };
        let rows = vec![
            CorpusRow {
                index: 0,
                patch_id: "a_00000".into(),
                source: "a".into(),
                rect: Some(PatchRect::new(3, 4, 32)),
                noise_seed: Some(17),
                noise_log: Some(log),
                img: pair_file(0, "img"),
                clean: pair_file(0, "clean"),
                noisy: Some(pair_file(0, "noisy")),
            },
            CorpusRow {
                index: 1,
                patch_id: "b".into(),
                source: "synth".into(),
                rect: None,
                noise_seed: None,
                noise_log: None,
                img: pair_file(1, "img"),
                clean: pair_file(1, "clean"),
                noisy: None,
            },
        ];
        let prov = serde_json::json!({"command": "test", "seed": 1});
        write_manifest(dir.path(), &prov, &rows).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.rows, rows);
        assert_eq!(m.provenance, prov);
    }

    #[test]
    fn escaping_paths_rejected() {
        let d = Path::new("/tmp/x");
        assert!(resolve(d, "../etc/passwd").is_err());
        assert!(resolve(d, "/etc/passwd").is_err());
        assert_eq!(resolve(d, "pairs/a.png").unwrap(), d.join("pairs/a.png"));
    }

    #[test]
    fn digest_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
