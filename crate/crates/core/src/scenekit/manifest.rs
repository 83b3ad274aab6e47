//! Corpus on disk: `manifest.jsonl` (one scene per line), `images/*.png` and
//! `embeddings.bin` (little-endian f64, addressed by `[offset, len]` refs).
//!
//! Record fields: `id`, `image_path` (relative to the manifest directory),
//! `prompt`, `objects` (each `text`, `shape`, `color`, `bbox` as
//! `[x0, y0, x1, y1]` with exclusive upper bounds, `text_embedding`,
//! `image_embedding`), optional `scores` and optional `group`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::QualityScore;
use crate::error::{Error, Result};
use crate::numkit::Rng;

use super::embed::Embedder;
use super::render::{crop, gen_scene_with, BBox, ObjectPlan, SceneObject, SceneSpec, MAX_OBJECTS};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const IMAGES_DIR: &str = "images";

/// `[offset, len]` into the embeddings file, in f64 units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingRef(pub usize, pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub text: String,
    pub shape: String,
    pub color: String,
    pub bbox: [u32; 4],
    pub text_embedding: EmbeddingRef,
    pub image_embedding: EmbeddingRef,
}

impl ObjectEntry {
    pub fn bbox(&self) -> BBox {
        let [x0, y0, x1, y1] = self.bbox;
        BBox { x0, y0, x1, y1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub image_path: String,
    pub prompt: String,
    pub objects: Vec<ObjectEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<QualityScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl SceneRecord {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            objects: self
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| SceneObject {
                    shape: o.shape.clone(),
                    color: o.color.clone(),
                    bbox: o.bbox(),
                    z_order: i,
                    frame: o.bbox(),
                })
                .collect(),
        }
    }
}

/// An object with its embeddings resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub text: String,
    pub bbox: BBox,
    pub text_embedding: Vec<f64>,
    pub image_embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory holding the manifest; image paths resolve against it.
    pub dir: PathBuf,
    pub records: Vec<SceneRecord>,
    pub embeddings: Vec<f64>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn embedding(&self, r: EmbeddingRef) -> Option<&[f64]> {
        self.embeddings.get(r.0..r.0.checked_add(r.1)?)
    }

    pub fn image_path(&self, rec: &SceneRecord) -> PathBuf {
        self.dir.join(&rec.image_path)
    }

    pub fn load_image(&self, rec: &SceneRecord) -> Result<RgbImage> {
        let p = self.image_path(rec);
        let img = image::open(&p).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&p, io),
            other => Error::Data {
                record: rec.id.to_string(),
                message: format!("{}: {other}", p.display()),
            },
        })?;
        Ok(img.to_rgb8())
    }

    pub fn objects(&self, rec: &SceneRecord) -> Result<Vec<ObjectRecord>> {
        rec.objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let get = |r: EmbeddingRef, what: &str| {
                    self.embedding(r)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::Data {
                            record: rec.id.to_string(),
                            message: format!("object {i}: {what} embedding {:?} missing", r),
                        })
                };
                Ok(ObjectRecord {
                    text: o.text.clone(),
                    bbox: o.bbox(),
                    text_embedding: get(o.text_embedding, "text")?,
                    image_embedding: get(o.image_embedding, "image")?,
                })
            })
            .collect()
    }

    /// Reads `manifest.jsonl` and its sibling embeddings file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Data {
                record: format!("line {}", n + 1),
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        let emb_path = dir.join(EMBEDDINGS_FILE);
        let bytes = fs::read(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("{} is not a whole number of f64 values", emb_path.display()),
            });
        }
        let embeddings = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Self {
            dir,
            records,
            embeddings,
        };
        m.validate()?;
        Ok(m)
    }

    /// Referenced images exist and every embedding ref is in range.
    pub fn validate(&self) -> Result<()> {
        for rec in &self.records {
            if !self.image_path(rec).is_file() {
                return Err(Error::Data {
                    record: rec.id.to_string(),
                    message: format!("missing image {}", self.image_path(rec).display()),
                });
            }
            self.objects(rec)?;
        }
        Ok(())
    }

    /// Writes the manifest and embeddings into `self.dir`; images are
    /// expected to be there already.
    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("records serialize");
            out.push(b'\n');
        }
        write_file(&path, &out)?;
        let bytes: Vec<u8> = self
            .embeddings
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write_file(&self.dir.join(EMBEDDINGS_FILE), &bytes)
    }

    /// Copy of the selected records (in the given order) into `out_dir`,
    /// with their images and the embeddings file.
    pub fn export(&self, indices: &[usize], out_dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(out_dir.join(IMAGES_DIR)).map_err(|e| Error::io(out_dir, e))?;
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let rec = self
                .records
                .get(i)
                .ok_or_else(|| Error::argument(format!("record index {i} out of range")))?;
            let src = self.image_path(rec);
            let dst = out_dir.join(&rec.image_path);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            if fs::canonicalize(&src).ok() != fs::canonicalize(&dst).ok() {
                fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
            }
            records.push(rec.clone());
        }
        let m = Manifest {
            dir: out_dir.to_path_buf(),
            records,
            embeddings: self.embeddings.clone(),
        };
        m.save()?;
        Ok(m)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusKind {
    /// Object counts drawn from `(count, weight)` pairs; distinct objects.
    Mixture(Vec<(usize, f64)>),
    /// Two objects per scene; even indices distinct, odd indices a duplicated
    /// near-identical pair. Records carry `group` = `distinct`/`duplicated`.
    Planted,
}

impl CorpusKind {
    pub fn default_mixture() -> Self {
        CorpusKind::Mixture(vec![(1, 0.2), (2, 0.5), (3, 0.2), (4, 0.1)])
    }

    /// Drops counts above `max` and renormalizes.
    pub fn capped(self, max: usize) -> Result<Self> {
        match self {
            CorpusKind::Mixture(m) => {
                let kept: Vec<(usize, f64)> = m.into_iter().filter(|(c, _)| *c <= max).collect();
                if kept.is_empty() {
                    return Err(Error::config(format!("no object count at or below {max}")));
                }
                Ok(CorpusKind::Mixture(kept))
            }
            p => Ok(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub seed: u64,
    pub kind: CorpusKind,
}

fn draw_count(mix: &[(usize, f64)], rng: &mut Rng) -> usize {
    let total: f64 = mix.iter().map(|m| m.1).sum();
    let mut u = rng.uniform() * total;
    for &(c, w) in mix {
        if u < w {
            return c;
        }
        u -= w;
    }
    mix.last().unwrap().0
}

struct Built {
    record: SceneRecord,
    png: Vec<u8>,
    vectors: Vec<Vec<f64>>,
}

fn build_one(cfg: &DatasetConfig, i: usize, embedder: &dyn Embedder) -> Result<Built> {
    let mut rng = Rng::new(cfg.seed).derive_indexed("scene", i as u64);
    let (n, plan, group) = match &cfg.kind {
        CorpusKind::Mixture(mix) => (draw_count(mix, &mut rng), ObjectPlan::Distinct, None),
        CorpusKind::Planted if i % 2 == 0 => (2, ObjectPlan::Distinct, Some("distinct")),
        CorpusKind::Planted => (2, ObjectPlan::Duplicated, Some("duplicated")),
    };
    let (img, spec) = gen_scene_with(&mut rng, n, &plan)?;
    let mut vectors = Vec::new();
    let mut objects = Vec::new();
    for o in &spec.objects {
        vectors.push(embedder.embed_text(&o.label())?);
        vectors.push(embedder.embed_image(&crop(&img, &o.bbox))?);
        objects.push(ObjectEntry {
            text: o.label(),
            shape: o.shape.clone(),
            color: o.color.clone(),
            bbox: [o.bbox.x0, o.bbox.y0, o.bbox.x1, o.bbox.y1],
            text_embedding: EmbeddingRef(0, 0),
            image_embedding: EmbeddingRef(0, 0),
        });
    }
    let mut png = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| Error::Generation(format!("png encoding: {e}")))?;
    Ok(Built {
        record: SceneRecord {
            id: i as u64,
            image_path: format!("{IMAGES_DIR}/{i:06}.png"),
            prompt: spec.prompt(),
            objects,
            scores: None,
            group: group.map(str::to_string),
        },
        png,
        vectors,
    })
}

/// Generates the corpus in parallel (one derived stream per scene, so the
/// output does not depend on the worker count) and writes it to `out_dir`.
pub fn build_dataset(
    cfg: &DatasetConfig,
    out_dir: &Path,
    embedder: &dyn Embedder,
) -> Result<Manifest> {
    if cfg.n_images == 0 {
        return Err(Error::config("n_images must be positive"));
    }
    if let CorpusKind::Mixture(m) = &cfg.kind {
        if m.is_empty()
            || m.iter()
                .any(|&(c, w)| c == 0 || c > MAX_OBJECTS || !(w >= 0.0))
        {
            return Err(Error::config(format!("bad object-count mixture {m:?}")));
        }
    }
    let img_dir = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let built: Vec<Built> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| build_one(cfg, i, embedder))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(built.len());
    let mut embeddings = Vec::new();
    for b in built {
        write_file(&out_dir.join(&b.record.image_path), &b.png)?;
        let mut rec = b.record;
        let mut vecs = b.vectors.into_iter();
        for o in rec.objects.iter_mut() {
            let t = vecs.next().unwrap();
            o.text_embedding = EmbeddingRef(embeddings.len(), t.len());
            embeddings.extend(t);
            let v = vecs.next().unwrap();
            o.image_embedding = EmbeddingRef(embeddings.len(), v.len());
            embeddings.extend(v);
        }
        records.push(rec);
    }
    let m = Manifest {
        dir: out_dir.to_path_buf(),
        records,
        embeddings,
    };
    m.save()?;
    Ok(m)
}

/// Recomputes every object embedding with `embedder`, replacing the
/// embeddings table.
pub fn reembed(m: &Manifest, embedder: &dyn Embedder) -> Result<Manifest> {
    let per: Vec<Vec<Vec<f64>>> = m
        .records
        .par_iter()
        .map(|rec| {
            let img = m.load_image(rec)?;
            let mut out = Vec::new();
            for o in &rec.objects {
                out.push(embedder.embed_text(&o.text)?);
                out.push(embedder.embed_image(&crop(&img, &o.bbox()))?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut next = m.clone();
    next.embeddings.clear();
    for (rec, vecs) in next.records.iter_mut().zip(per) {
        let mut it = vecs.into_iter();
        for o in rec.objects.iter_mut() {
            let t = it.next().unwrap();
            o.text_embedding = EmbeddingRef(next.embeddings.len(), t.len());
            next.embeddings.extend(t);
            let v = it.next().unwrap();
            o.image_embedding = EmbeddingRef(next.embeddings.len(), v.len());
            next.embeddings.extend(v);
        }
    }
    Ok(next)
}
