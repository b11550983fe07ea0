//! On-disk dataset: `manifest.txt`, `studies/<id>.bin` and optional
//! `previews/<id>_<k>.pgm`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::synth::{generate_study, Study, SynthConfig, GENERATOR_VERSION};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StudyEntry {
    pub study_id: u64,
    pub file: String,
    /// Byte offset of this blob in the concatenation of all blobs.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub seed: u64,
    pub n: usize,
    pub difficulty: f64,
    pub size: usize,
    pub benign: usize,
    pub malignant: usize,
    pub studies: Vec<StudyEntry>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "generator_version={}", self.generator_version);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n={}", self.n);
        let _ = writeln!(s, "difficulty={}", self.difficulty);
        let _ = writeln!(s, "size={}", self.size);
        let _ = writeln!(s, "benign={}", self.benign);
        let _ = writeln!(s, "malignant={}", self.malignant);
        for e in &self.studies {
            let _ = writeln!(
                s,
                "study {} {} {} {}",
                e.study_id, e.file, e.offset, e.bytes
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = DatasetManifest {
            generator_version: 0,
            seed: 0,
            n: 0,
            difficulty: 0.0,
            size: 0,
            benign: 0,
            malignant: 0,
            studies: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let err = || Error::Data(format!("manifest line {}: {line:?}", i + 1));
            if let Some(rest) = line.strip_prefix("study ") {
                let f: Vec<&str> = rest.split(' ').collect();
                let [id, file, offset, bytes] = f[..] else {
                    return Err(err());
                };
                m.studies.push(StudyEntry {
                    study_id: id.parse().map_err(|_| err())?,
                    file: file.to_string(),
                    offset: offset.parse().map_err(|_| err())?,
                    bytes: bytes.parse().map_err(|_| err())?,
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(err)?;
            match k {
                "generator_version" => m.generator_version = v.parse().map_err(|_| err())?,
                "seed" => m.seed = v.parse().map_err(|_| err())?,
                "n" => m.n = v.parse().map_err(|_| err())?,
                "difficulty" => m.difficulty = v.parse().map_err(|_| err())?,
                "size" => m.size = v.parse().map_err(|_| err())?,
                "benign" => m.benign = v.parse().map_err(|_| err())?,
                "malignant" => m.malignant = v.parse().map_err(|_| err())?,
                _ => return Err(err()),
            }
        }
        if m.studies.len() != m.n {
            return Err(Error::Data(format!(
                "manifest lists {} studies but n={}",
                m.studies.len(),
                m.n
            )));
        }
        Ok(m)
    }
}

pub fn study_to_container(s: &Study) -> Result<Container> {
    let keys: Vec<String> = s.keyframe_indices().iter().map(usize::to_string).collect();
    let mut tensors = Vec::with_capacity(s.images.len() + 1);
    for (k, img) in s.images.iter().enumerate() {
        tensors.push((
            format!("image.{k}"),
            Tensor::new(vec![s.size, s.size], img.clone())?,
        ));
    }
    let video: Vec<f32> = s.video.iter().flatten().copied().collect();
    tensors.push((
        "video".to_string(),
        Tensor::new(vec![s.video.len(), s.size, s.size], video)?,
    ));
    Ok(Container {
        meta: vec![
            ("study_id".into(), s.study_id.to_string()),
            ("label".into(), s.label.to_string()),
            ("keyframes".into(), keys.join(",")),
        ],
        tensors,
    })
}

pub fn study_from_container(c: &Container) -> Result<Study> {
    let bad = |m: &str| Error::Data(format!("study blob: {m}"));
    let study_id: u64 = c
        .require_meta("study_id")?
        .parse()
        .map_err(|_| bad("study_id"))?;
    let label: u8 = c.require_meta("label")?.parse().map_err(|_| bad("label"))?;
    if label > 1 {
        return Err(bad("label must be 0 or 1"));
    }
    let keyframes = c
        .require_meta("keyframes")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("keyframes")))
        .collect::<Result<Vec<usize>>>()?;
    let video = c.tensor("video").ok_or_else(|| bad("missing video"))?;
    let &[t, size, w] = video.shape() else {
        return Err(bad("video must be TxHxW"));
    };
    if size != w {
        return Err(bad("frames must be square"));
    }
    let frames = video
        .data()
        .chunks(size * size)
        .map(<[f32]>::to_vec)
        .collect::<Vec<_>>();
    debug_assert_eq!(frames.len(), t);
    let mut images = Vec::new();
    while let Some(img) = c.tensor(&format!("image.{}", images.len())) {
        if img.shape() != [size, size] {
            return Err(bad("image size differs from video"));
        }
        images.push(img.data().to_vec());
    }
    if images.is_empty() {
        return Err(Error::EmptyStudy);
    }
    Ok(Study::from_parts(
        study_id, label, size, images, frames, keyframes,
    ))
}

/// Binary PGM (P5) of a `[0,1]` grayscale image.
pub fn pgm_bytes(img: &[f32], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        img.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub seed: u64,
    pub n: usize,
    pub synth: SynthConfig,
    /// Allow writing into a non-empty directory.
    pub force: bool,
    pub previews: bool,
}

/// Generate and write a dataset; returns the manifest and the dataset hash.
pub fn write_dataset(dir: &Path, opts: &GenerateOptions) -> Result<(DatasetManifest, String)> {
    if opts.n == 0 {
        return Err(Error::Config("dataset needs at least one study".into()));
    }
    opts.synth.validate()?;
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !opts.force {
            return Err(Error::Config(format!(
                "{} exists and is not empty (use --force)",
                dir.display()
            )));
        }
    }
    create_dir(&dir.join("studies"))?;
    if opts.previews {
        create_dir(&dir.join("previews"))?;
    }
    let blobs: Vec<(Study, Vec<u8>)> = (0..opts.n as u64)
        .into_par_iter()
        .map(|id| {
            let s = generate_study(opts.seed, id, &opts.synth)?;
            let bytes = study_to_container(&s)?.to_bytes()?;
            Ok((s, bytes))
        })
        .collect::<Result<_>>()?;

    let mut studies = Vec::with_capacity(blobs.len());
    let mut offset = 0u64;
    let mut malignant = 0;
    for (s, bytes) in &blobs {
        let file = format!("studies/{}.bin", s.study_id);
        write_file(&dir.join(&file), bytes)?;
        if opts.previews {
            for (k, img) in s.images.iter().enumerate() {
                let p = dir.join(format!("previews/{}_{k}.pgm", s.study_id));
                write_file(&p, &pgm_bytes(img, s.size, s.size))?;
            }
        }
        malignant += s.label as usize;
        studies.push(StudyEntry {
            study_id: s.study_id,
            file,
            offset,
            bytes: bytes.len() as u64,
        });
        offset += bytes.len() as u64;
    }
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION,
        seed: opts.seed,
        n: opts.n,
        difficulty: opts.synth.difficulty,
        size: opts.synth.size,
        benign: opts.n - malignant,
        malignant,
        studies,
    };
    write_file(&dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    let hash = dataset_hash(dir)?;
    Ok((manifest, hash))
}

/// SHA-256 over the manifest followed by every study blob in manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = DatasetManifest::parse(&String::from_utf8_lossy(&text))?;
    let mut h = Sha256::new();
    h.update(&text);
    for e in &manifest.studies {
        let p = dir.join(&e.file);
        h.update(fs::read(&p).map_err(|err| Error::io(&p, err))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub studies: Vec<Study>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "dataset directory {} not found",
                dir.display()
            )));
        }
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = DatasetManifest::parse(&text)?;
        let studies = manifest
            .studies
            .iter()
            .map(|e| {
                let s = study_from_container(&Container::read(&dir.join(&e.file))?)?;
                if s.study_id != e.study_id {
                    return Err(Error::Data(format!(
                        "{} holds study {}, manifest says {}",
                        e.file, s.study_id, e.study_id
                    )));
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            studies,
        })
    }

    pub fn study(&self, id: u64) -> Result<&Study> {
        self.studies
            .iter()
            .find(|s| s.study_id == id)
            .ok_or_else(|| Error::Data(format!("study {id} not in dataset {}", self.dir.display())))
    }
}
