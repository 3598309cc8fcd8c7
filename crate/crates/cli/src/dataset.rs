//! Dataset ingestion for both source kinds, plus the content manifests used
//! for provenance records and the victim/surrogate disjointness check.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gilab_core::data::{self, Dataset};
use gilab_core::par::Threads;
use gilab_core::rng;
use gilab_core::tensor::Tensor;

use crate::config::SourceSpec;
use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// PNG path relative to the dataset root, or the per-image generator
    /// seed for synthetic sources.
    pub source: String,
    pub label: usize,
    pub digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceManifest {
    /// [C, H, W] of every image.
    pub shape: Vec<usize>,
    pub normalization: String,
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub struct Loaded {
    pub data: Dataset,
    pub manifest: SourceManifest,
}

pub fn load_source(spec: &SourceSpec, threads: &Threads) -> Result<Loaded, CliError> {
    match spec {
        SourceSpec::Synthetic(cfg) => {
            let data = data::generate(cfg, threads).map_err(|e| CliError::Config(e.to_string()))?;
            let entries = (0..data.labels.len())
                .map(|i| {
                    Ok(ManifestEntry {
                        source: format!("seed:{}", rng::derive(cfg.seed, i as u64)),
                        label: data.labels[i],
                        digest: row_digest(&data.images, i)?,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok(Loaded {
                manifest: manifest_for(&data, entries),
                data,
            })
        }
        SourceSpec::PngDir { path } => load_png_dir(Path::new(path)),
    }
}

fn manifest_for(data: &Dataset, entries: Vec<ManifestEntry>) -> SourceManifest {
    SourceManifest {
        shape: data.images.shape()[1..].to_vec(),
        normalization: "[0,1]".into(),
        classes: data.classes,
        entries,
    }
}

fn row_digest(images: &Tensor, i: usize) -> Result<String, CliError> {
    Ok(data::tensor_digest(&images.row(i)?))
}

/// Loads an 8-bit PNG tree with one class per subdirectory. Subdirectories
/// and files are taken in name order, so the row order (and therefore the
/// dataset digest) is independent of filesystem enumeration order.
fn load_png_dir(root: &Path) -> Result<Loaded, CliError> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(CliError::Config(format!(
            "{} has no class subdirectories; expected one directory of PNGs per class",
            root.display()
        )));
    }

    let mut images: Vec<Tensor> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut sources: Vec<String> = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for file in files {
            let image = data::load_png(&file).map_err(|e| CliError::Config(e.to_string()))?;
            let rel = file
                .strip_prefix(root)
                .unwrap_or(&file)
                .to_string_lossy()
                .into_owned();
            images.push(image);
            labels.push(label);
            sources.push(rel);
        }
    }
    if images.is_empty() {
        return Err(CliError::Config(format!(
            "{} contains no PNG files",
            root.display()
        )));
    }

    let want = images[0].shape().to_vec();
    let offenders: Vec<String> = images
        .iter()
        .zip(&sources)
        .filter(|(img, _)| img.shape() != want)
        .map(|(img, src)| format!("{src} is {:?}", img.shape()))
        .collect();
    if !offenders.is_empty() {
        return Err(CliError::Config(format!(
            "{}: images must share one shape; first image is {want:?} but {}",
            root.display(),
            offenders.join(", ")
        )));
    }

    let stacked = Tensor::stack(&images).map_err(|e| CliError::Failure(e.to_string()))?;
    let entries = sources
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (source, &label))| {
            Ok(ManifestEntry {
                source: source.clone(),
                label,
                digest: row_digest(&stacked, i)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let data = Dataset {
        images: stacked,
        labels,
        classes: class_dirs.len(),
    };
    Ok(Loaded {
        manifest: manifest_for(&data, entries),
        data,
    })
}

/// The victim and surrogate sets must not share a single image.
pub fn check_disjoint(victim: &SourceManifest, surrogate: &SourceManifest) -> Result<(), CliError> {
    let v: BTreeSet<&str> = victim.entries.iter().map(|e| e.digest.as_str()).collect();
    let shared: Vec<&str> = surrogate
        .entries
        .iter()
        .map(|e| e.digest.as_str())
        .filter(|d| v.contains(d))
        .collect();
    if shared.is_empty() {
        return Ok(());
    }
    Err(CliError::Config(format!(
        "victim and surrogate datasets share {} image(s) (content digest {}...); \
         the experiment requires disjoint sets",
        shared.len(),
        &shared[0][..12.min(shared[0].len())]
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gilab_core::data::{SyntheticConfig, SyntheticKind};

    fn synth(seed: u64, count: usize) -> SourceSpec {
        SourceSpec::Synthetic(SyntheticConfig {
            kind: SyntheticKind::Shapes,
            count,
            channels: 1,
            height: 8,
            width: 8,
            classes: 2,
            seed,
        })
    }

    #[test]
    fn synthetic_manifest_is_reproducible() {
        let t = Threads::one();
        let a = load_source(&synth(7, 6), &t).unwrap();
        let b = load_source(&synth(7, 6), &t).unwrap();
        let da: Vec<_> = a.manifest.entries.iter().map(|e| &e.digest).collect();
        let db: Vec<_> = b.manifest.entries.iter().map(|e| &e.digest).collect();
        assert_eq!(da, db);
        assert_eq!(a.manifest.shape, vec![1, 8, 8]);
    }

    #[test]
    fn same_seed_sources_collide_and_different_seeds_pass() {
        let t = Threads::one();
        let a = load_source(&synth(7, 6), &t).unwrap();
        let b = load_source(&synth(7, 6), &t).unwrap();
        let c = load_source(&synth(8, 6), &t).unwrap();
        assert!(check_disjoint(&a.manifest, &b.manifest).is_err());
        assert!(check_disjoint(&a.manifest, &c.manifest).is_ok());
    }

    #[test]
    fn png_tree_round_trips_with_class_labels() {
        let t = Threads::one();
        let src = load_source(&synth(3, 6), &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, &label) in src.data.labels.iter().enumerate() {
            let class_dir = dir.path().join(format!("class{label}"));
            fs::create_dir_all(&class_dir).unwrap();
            let img = src.data.images.row(i).unwrap().reshape(&[1, 8, 8]).unwrap();
            data::save_png(&class_dir.join(format!("img{i:03}.png")), &img).unwrap();
        }
        let spec = SourceSpec::PngDir {
            path: dir.path().to_string_lossy().into_owned(),
        };
        let loaded = load_source(&spec, &t).unwrap();
        assert_eq!(loaded.data.classes, 2);
        assert_eq!(loaded.data.images.shape(), &[6, 1, 8, 8]);
        // class0 rows come first; within a class the original order holds
        let mut expect: Vec<usize> = src.data.labels.clone();
        expect.sort();
        assert_eq!(loaded.data.labels, expect);
        for v in loaded.data.images.data() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn empty_and_mixed_size_trees_are_rejected() {
        let t = Threads::one();
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        let spec = SourceSpec::PngDir {
            path: dir.path().to_string_lossy().into_owned(),
        };
        assert!(matches!(
            load_source(&spec, &t),
            Err(CliError::Config(m)) if m.contains("no PNG files")
        ));

        let img8 = load_source(&synth(3, 2), &t).unwrap().data.images;
        data::save_png(
            &dir.path().join("a/one.png"),
            &img8.row(0).unwrap().reshape(&[1, 8, 8]).unwrap(),
        )
        .unwrap();
        let wide = Tensor::zeros(&[1, 8, 10]);
        data::save_png(&dir.path().join("a/two.png"), &wide).unwrap();
        match load_source(&spec, &t) {
            Err(CliError::Config(m)) => assert!(m.contains("two.png"), "{m}"),
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error, got a dataset"),
        }
    }
}
