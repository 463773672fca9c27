//! On-disk dataset: per-snippet frame directories plus a text manifest.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/snippet_0000/input/frame_0000.ppm
//! <root>/snippet_0000/mask/frame_0000.pgm
//! <root>/snippet_0000/clean/frame_0000.ppm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{read_pgm_mask, read_ppm, write_pgm_mask, write_ppm};
use super::synth::{synthesize_snippet, Profile, Snippet, SynthConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "osvi-dataset v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Relative to the dataset root.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER} {} {} {}\n", self.height, self.width, self.frames);
        for e in &self.entries {
            s.push_str(&format!("snippet {} {} {}\n", e.id, e.seed, e.dir));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |r: String| Error::format("manifest", r);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let rest = head
            .strip_prefix(HEADER)
            .ok_or_else(|| bad(format!("unexpected header `{head}`")))?;
        let dims: Vec<usize> = rest
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| bad(format!("bad size `{v}`"))))
            .collect::<Result<_>>()?;
        let [height, width, frames] = dims[..] else {
            return Err(bad(format!("header needs H W T, got `{rest}`")));
        };
        let mut entries = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f[..] {
                ["snippet", id, seed, dir] => entries.push(ManifestEntry {
                    id: id.to_string(),
                    seed: seed.parse().map_err(|_| bad(format!("bad seed in `{line}`")))?,
                    dir: dir.to_string(),
                }),
                _ => return Err(bad(format!("unexpected line `{line}`"))),
            }
        }
        Ok(Manifest {
            height,
            width,
            frames,
            entries,
        })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("frame_{t:04}.{ext}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a `[T, 3, H, W]` clip as `frame_%04d.ppm` files.
pub fn write_frames(dir: &Path, video: &Tensor<f32>) -> Result<()> {
    create_dir(dir)?;
    for t in 0..video.shape()[0] {
        let s = video.shape();
        let frame = video.narrow(0, t, 1)?.reshaped(&s[1..])?;
        write_ppm(dir.join(frame_name(t, "ppm")), &frame)?;
    }
    Ok(())
}

/// Writes `[T, H, W]` masks as `frame_%04d.pgm` files.
pub fn write_masks(dir: &Path, masks: &Tensor<f32>) -> Result<()> {
    create_dir(dir)?;
    for t in 0..masks.shape()[0] {
        let s = masks.shape();
        let m = masks.narrow(0, t, 1)?.reshaped(&s[1..])?;
        write_pgm_mask(dir.join(frame_name(t, "pgm")), &m)?;
    }
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stack(items: Vec<Tensor<f32>>, what: &str, dir: &Path) -> Result<Tensor<f32>> {
    let first = items
        .first()
        .ok_or_else(|| Error::format("frames", format!("no {what} files in {}", dir.display())))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in &items {
        if t.shape() != shape {
            return Err(Error::format("frames", format!("{what} sizes differ in {}", dir.display())));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Reads every `*.ppm` in `dir` (sorted by name) as a `[T, 3, H, W]` clip.
pub fn read_frames(dir: &Path) -> Result<Tensor<f32>> {
    let frames = sorted_files(dir, "ppm")?
        .iter()
        .map(read_ppm)
        .collect::<Result<Vec<_>>>()?;
    stack(frames, "ppm", dir)
}

/// Reads every `*.pgm` in `dir` (sorted by name) as `[T, H, W]` masks.
pub fn read_masks(dir: &Path) -> Result<Tensor<f32>> {
    let masks = sorted_files(dir, "pgm")?
        .iter()
        .map(read_pgm_mask)
        .collect::<Result<Vec<_>>>()?;
    stack(masks, "pgm", dir)
}

pub fn write_snippet(dir: &Path, s: &Snippet) -> Result<()> {
    write_frames(&dir.join("input"), &s.input)?;
    write_masks(&dir.join("mask"), &s.masks)?;
    write_frames(&dir.join("clean"), &s.clean)
}

pub fn read_snippet(dir: &Path, id: &str, seed: u64) -> Result<Snippet> {
    let s = Snippet {
        id: id.to_string(),
        seed,
        input: read_frames(&dir.join("input"))?,
        masks: read_masks(&dir.join("mask"))?,
        clean: read_frames(&dir.join("clean"))?,
    };
    let (i, m, c) = (s.input.shape(), s.masks.shape(), s.clean.shape());
    if i != c || m != [i[0], i[2], i[3]] {
        return Err(Error::format("snippet", format!("{}: input/mask/clean sizes disagree", dir.display())));
    }
    Ok(s)
}

/// Synthesises `n` snippets with seeds `seed, seed + 1, ...` under `root`.
pub fn write_dataset(n: usize, root: &Path, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    create_dir(root)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let s_seed = seed.wrapping_add(i as u64);
        let snippet = synthesize_snippet(s_seed, cfg)?;
        let dir = format!("snippet_{i:04}");
        write_snippet(&root.join(&dir), &snippet)?;
        entries.push(ManifestEntry {
            id: snippet.id,
            seed: s_seed,
            dir,
        });
    }
    let manifest = Manifest {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        entries,
    };
    let path = root.join(MANIFEST);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads every snippet listed in the manifest under `root`.
pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<Snippet>)> {
    let manifest = Manifest::read(root)?;
    let snippets = manifest
        .entries
        .iter()
        .map(|e| read_snippet(&root.join(&e.dir), &e.id, e.seed))
        .collect::<Result<Vec<_>>>()?;
    for s in &snippets {
        let sh = s.input.shape();
        if sh[0] != manifest.frames || sh[2] != manifest.height || sh[3] != manifest.width {
            return Err(Error::format(
                "dataset",
                format!("{}: clip {:?} differs from manifest size", s.id, sh),
            ));
        }
    }
    Ok((manifest, snippets))
}

/// Regenerates a listed snippet from its seed.
pub fn replay(manifest: &Manifest, entry: &ManifestEntry) -> Result<Snippet> {
    let profile: Profile = entry
        .id
        .rsplit_once('-')
        .map(|(p, _)| p)
        .unwrap_or("")
        .parse()?;
    let cfg = SynthConfig {
        frames: manifest.frames,
        height: manifest.height,
        width: manifest.width,
        profile,
    };
    synthesize_snippet(entry.seed, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            height: 48,
            width: 80,
            frames: 7,
            entries: vec![ManifestEntry {
                id: "toy-B-3".into(),
                seed: 3,
                dir: "snippet_0000".into(),
            }],
        };
        let text = m.to_text();
        assert_eq!(text, "osvi-dataset v1 48 80 7\nsnippet toy-B-3 3 snippet_0000\n");
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(Manifest::parse("osvi-dataset v2 1 1 1").is_err());
        assert!(Manifest::parse("osvi-dataset v1 1 1 1\nclip a 1 b").is_err());
    }

    #[test]
    fn dataset_layout_round_trip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { profile: Profile::ToyB, ..SynthConfig::default() };
        let m = write_dataset(3, dir.path(), &cfg, 40).unwrap();
        for e in &m.entries {
            for (sub, ext) in [("input", "ppm"), ("mask", "pgm"), ("clean", "ppm")] {
                assert_eq!(sorted_files(&dir.path().join(&e.dir).join(sub), ext).unwrap().len(), 7);
            }
        }
        let (m2, snippets) = read_dataset(dir.path()).unwrap();
        assert_eq!(m2, m);
        for (e, s) in m.entries.iter().zip(&snippets) {
            assert_eq!(&replay(&m, e).unwrap(), s);
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(0, dir.path(), &SynthConfig::default(), 1).unwrap();
        assert!(m.entries.is_empty());
        assert!(read_dataset(dir.path()).unwrap().1.is_empty());
    }
}
