//! Patch dataset construction: cropping, class balancing, train/test
//! splitting, geometric augmentation and per-patch whitening.
//!
//! Every stochastic step derives its randomness from `(seed, item id)` via
//! [`crate::seed::derive_seed`], so results are reproducible and independent
//! of scheduling order when images are processed in parallel.

mod augment;
mod store;
mod whiten;

pub use augment::{augment_patch, hflip, vflip};
pub use store::{
    load_image, load_patch_store, save_image, write_patch_store, PatchIndexRow, PatchStore,
    RunMetadata,
    StratumCount,
};
pub use whiten::{whiten_patch, NormalizedPatch};

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_model::{ImageRecord, StoneClass, ViewKind};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

/// A patch-size crop of a source image, with provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub patch_id: String,
    /// H×W×3 color pixels.
    pub pixels: Array3<u8>,
    pub label: StoneClass,
    pub view: ViewKind,
    pub source_image_id: String,
    pub specimen_id: String,
    /// Present on augmented variants, naming the original crop.
    pub augmented_from: Option<String>,
}

impl Patch {
    /// Stratum key used for balancing and splitting.
    pub fn stratum(&self) -> (StoneClass, ViewKind) {
        (self.label.clone(), self.view)
    }
}

/// Pipeline configuration. Defaults follow the reference profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Side length of square crops, pixels.
    pub patch_size: usize,
    /// Crops attempted per source image.
    pub patches_per_image: usize,
    /// Balancing target per (class, view) group.
    pub target_per_class_per_view: usize,
    /// Fraction of patches held out for test.
    pub test_fraction: f64,
    /// Augmented variants generated per training patch.
    pub augmentation_variants: usize,
    /// Standard-deviation floor applied when whitening.
    pub sigma_floor: f64,
    /// Master seed for all pipeline randomness.
    pub seed: u64,
    /// Keep all patches of one specimen on the same split side.
    pub leak_free_split: bool,
    /// Background exemplar color for the crop foreground test; `None`
    /// disables the test.
    pub background_color: Option<[u8; 3]>,
    /// Per-channel tolerance around the background color.
    pub background_tolerance: u8,
    /// A crop is rejected when at least this fraction of its pixels is
    /// background-colored.
    pub max_background_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch_size: 256,
            patches_per_image: 20,
            target_per_class_per_view: 1000,
            test_fraction: 0.20,
            augmentation_variants: 7,
            sigma_floor: 1e-6,
            seed: 0,
            leak_free_split: false,
            background_color: Some([0, 0, 0]),
            background_tolerance: 12,
            max_background_fraction: 0.8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 {
            return Err(Error::Config(format!(
                "patch_size must be >= 8, got {}",
                self.patch_size
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.patches_per_image < 1 || self.target_per_class_per_view < 1 {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if self.sigma_floor <= 0.0 || self.sigma_floor.is_nan() {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        if !(self.max_background_fraction > 0.0 && self.max_background_fraction <= 1.0) {
            return Err(Error::Config(
                "max_background_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of cropping one source image.
#[derive(Debug, Clone)]
pub struct ExtractReport {
    pub patches: Vec<Patch>,
    /// Candidate origins rejected by the foreground test.
    pub rejected_background: usize,
    /// Set when fewer than `patches_per_image` valid origins exist.
    pub warning: Option<String>,
}

/// Crops up to `patches_per_image` patches from a decoded image.
///
/// Origins are a uniform random sample, without duplication, of the crop
/// positions whose content passes the foreground test. Deterministic given
/// `(seed, record.image_id)`.
pub fn extract_patches(
    image: &Array3<u8>,
    record: &ImageRecord,
    config: &PipelineConfig,
    seed: u64,
) -> Result<ExtractReport> {
    config.validate()?;
    let (height, width, channels) = image.dim();
    if channels != 3 {
        return Err(Error::Image {
            id: record.image_id.clone(),
            message: format!("expected 3 channels, got {channels}"),
        });
    }
    let ps = config.patch_size;
    if height < ps || width < ps {
        return Err(Error::Image {
            id: record.image_id.clone(),
            message: format!("image is {height}x{width}, smaller than patch size {ps}"),
        });
    }

    let rows = height - ps + 1;
    let cols = width - ps + 1;
    let candidates = rows * cols;

    // Prefix sums of the per-pixel background indicator make the foreground
    // test O(1) per candidate crop.
    let bg_prefix = config
        .background_color
        .map(|bg| background_prefix(image, bg, config.background_tolerance));
    let max_bg = (config.max_background_fraction * (ps * ps) as f64).ceil() as u64;

    let mut order: Vec<usize> = (0..candidates).collect();
    let mut rng = rng_for(derive_seed(seed, &format!("extract/{}", record.image_id)));
    order.shuffle(&mut rng);

    let mut patches = Vec::with_capacity(config.patches_per_image);
    let mut rejected = 0usize;
    for origin in order {
        if patches.len() == config.patches_per_image {
            break;
        }
        let (y, x) = (origin / cols, origin % cols);
        if let Some(prefix) = &bg_prefix {
            if crop_region_sum(prefix, y, x, ps) >= max_bg {
                rejected += 1;
                continue;
            }
        }
        let pixels = image
            .slice(ndarray::s![y..y + ps, x..x + ps, ..])
            .to_owned();
        patches.push(Patch {
            patch_id: format!("{}_p{:04}", record.image_id, patches.len()),
            pixels,
            label: record.stone_class.clone(),
            view: record.view,
            source_image_id: record.image_id.clone(),
            specimen_id: record.specimen_id.clone(),
            augmented_from: None,
        });
    }

    let warning = (patches.len() < config.patches_per_image).then(|| {
        format!(
            "image {}: only {} of {} requested patches had valid origins ({} rejected as background)",
            record.image_id,
            patches.len(),
            config.patches_per_image,
            rejected
        )
    });
    Ok(ExtractReport {
        patches,
        rejected_background: rejected,
        warning,
    })
}

fn background_prefix(image: &Array3<u8>, bg: [u8; 3], tol: u8) -> Array2<u64> {
    let (height, width, _) = image.dim();
    let mut prefix = Array2::<u64>::zeros((height + 1, width + 1));
    for y in 0..height {
        let mut row_sum = 0u64;
        for x in 0..width {
            let is_bg = (0..3).all(|c| {
                let v = image[[y, x, c]] as i16;
                (v - bg[c] as i16).abs() <= tol as i16
            });
            row_sum += u64::from(is_bg);
            prefix[[y + 1, x + 1]] = prefix[[y, x + 1]] + row_sum;
        }
    }
    prefix
}

fn crop_region_sum(prefix: &Array2<u64>, y: usize, x: usize, size: usize) -> u64 {
    prefix[[y + size, x + size]] + prefix[[y, x]] - prefix[[y, x + size]] - prefix[[y + size, x]]
}

/// A shortfall reported by [`balance_classes`] for an under-supplied group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Deficit {
    pub class: StoneClass,
    pub view: ViewKind,
    pub missing: usize,
}

/// Random-subsamples every (class, view) group down to `target` patches.
/// Groups below target are returned whole with a reported deficit.
pub fn balance_classes(
    patches: Vec<Patch>,
    target: usize,
    seed: u64,
) -> (Vec<Patch>, Vec<Deficit>) {
    let mut groups: BTreeMap<(StoneClass, ViewKind), Vec<Patch>> = BTreeMap::new();
    for patch in patches {
        groups.entry(patch.stratum()).or_default().push(patch);
    }

    let mut kept = Vec::new();
    let mut deficits = Vec::new();
    for ((class, view), group) in groups {
        if group.len() < target {
            deficits.push(Deficit {
                class: class.clone(),
                view,
                missing: target - group.len(),
            });
            kept.extend(group);
            continue;
        }
        let mut rng = rng_for(derive_seed(seed, &format!("balance/{class}/{view}")));
        let mut chosen = rand::seq::index::sample(&mut rng, group.len(), target).into_vec();
        chosen.sort_unstable();
        let mut group = group;
        // Drain in reverse so earlier indices stay valid.
        let mut picked = Vec::with_capacity(target);
        for idx in chosen.into_iter().rev() {
            picked.push(group.swap_remove(idx));
        }
        picked.reverse();
        kept.extend(picked);
    }
    (kept, deficits)
}

/// Reported difference between a stratum's achieved and requested test size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StratumDeviation {
    pub class: StoneClass,
    pub view: ViewKind,
    pub requested_test: usize,
    pub actual_test: usize,
}

#[derive(Debug)]
pub struct SplitOutcome {
    pub train: Vec<Patch>,
    pub test: Vec<Patch>,
    /// Non-empty only under leak-free splitting, where per-stratum sizes are
    /// approximate.
    pub deviations: Vec<StratumDeviation>,
}

/// Stratified train/test split. With `leak_free`, all patches of one
/// specimen land on the same side and stratum sizes become approximate.
pub fn split_train_test(
    patches: Vec<Patch>,
    test_fraction: f64,
    seed: u64,
    leak_free: bool,
) -> Result<SplitOutcome> {
    if patches.is_empty() {
        return Err(Error::Config("cannot split an empty patch set".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }

    let mut strata: BTreeMap<(StoneClass, ViewKind), Vec<usize>> = BTreeMap::new();
    for (idx, patch) in patches.iter().enumerate() {
        strata.entry(patch.stratum()).or_default().push(idx);
    }
    for ((class, view), members) in &strata {
        if members.len() < 2 {
            return Err(Error::Stratum {
                stratum: format!("{class}/{view}"),
                message: format!("{} patch(es) cannot be split", members.len()),
            });
        }
    }

    let mut to_test = vec![false; patches.len()];
    let mut deviations = Vec::new();

    if leak_free {
        // Specimens belong to a single class, so assignment happens per class
        // and the per-view stratum sizes follow approximately.
        let mut by_class: BTreeMap<StoneClass, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        for (idx, patch) in patches.iter().enumerate() {
            by_class
                .entry(patch.label.clone())
                .or_default()
                .entry(patch.specimen_id.clone())
                .or_default()
                .push(idx);
        }
        for (class, specimens) in by_class {
            let total: usize = specimens.values().map(Vec::len).sum();
            let want_test = (test_fraction * total as f64).round() as usize;
            let mut order: Vec<&String> = specimens.keys().collect();
            let mut rng = rng_for(derive_seed(seed, &format!("split-leakfree/{class}")));
            order.shuffle(&mut rng);
            let mut assigned = 0usize;
            for spec in order {
                if assigned >= want_test {
                    break;
                }
                for &idx in &specimens[spec] {
                    to_test[idx] = true;
                }
                assigned += specimens[spec].len();
            }
        }
        for ((class, view), members) in &strata {
            let requested = (test_fraction * members.len() as f64).round() as usize;
            let actual = members.iter().filter(|&&i| to_test[i]).count();
            if actual != requested {
                deviations.push(StratumDeviation {
                    class: class.clone(),
                    view: *view,
                    requested_test: requested,
                    actual_test: actual,
                });
            }
        }
    } else {
        for ((class, view), members) in &strata {
            let n_test = (test_fraction * members.len() as f64).round() as usize;
            let mut order = members.clone();
            let mut rng = rng_for(derive_seed(seed, &format!("split/{class}/{view}")));
            order.shuffle(&mut rng);
            for &idx in order.iter().take(n_test) {
                to_test[idx] = true;
            }
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, patch) in patches.into_iter().enumerate() {
        if to_test[idx] {
            test.push(patch);
        } else {
            train.push(patch);
        }
    }
    Ok(SplitOutcome {
        train,
        test,
        deviations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ImageRecord, Split, StoneClass, ViewKind};
    use std::collections::HashSet;

    fn record(id: &str, class: &str, view: ViewKind, specimen: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            path: format!("{id}.png").into(),
            stone_class: StoneClass::from(class),
            view,
            specimen_id: specimen.into(),
            split: Split::Unassigned,
        }
    }

    fn noise_image(height: usize, width: usize, seed: u64) -> Array3<u8> {
        use rand::Rng;
        let mut rng = rng_for(seed);
        Array3::from_shape_fn((height, width, 3), |_| rng.random_range(60..=255))
    }

    pub(crate) fn test_patch(id: &str, class: &str, view: ViewKind, specimen: &str) -> Patch {
        Patch {
            patch_id: id.into(),
            pixels: Array3::zeros((8, 8, 3)),
            label: StoneClass::from(class),
            view,
            source_image_id: format!("img_{specimen}"),
            specimen_id: specimen.into(),
            augmented_from: None,
        }
    }

    fn small_config(patch_size: usize, per_image: usize) -> PipelineConfig {
        PipelineConfig {
            patch_size,
            patches_per_image: per_image,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn exact_size_image_yields_single_patch() {
        let img = noise_image(256, 256, 1);
        let rec = record("k001", "WW", ViewKind::Surface, "s1");
        let report = extract_patches(&img, &rec, &small_config(256, 5), 7).unwrap();
        assert_eq!(report.patches.len(), 1);
        assert!(report.warning.is_some());
        assert_eq!(report.patches[0].pixels, img);
    }

    #[test]
    fn extraction_is_deterministic_for_fixed_seed() {
        let img = noise_image(512, 512, 2);
        let rec = record("k002", "WD", ViewKind::Section, "s2");
        let cfg = small_config(256, 4);
        let a = extract_patches(&img, &rec, &cfg, 99).unwrap();
        let b = extract_patches(&img, &rec, &cfg, 99).unwrap();
        assert_eq!(a.patches.len(), 4);
        for (pa, pb) in a.patches.iter().zip(&b.patches) {
            assert_eq!(pa.pixels, pb.pixels);
            assert_eq!(pa.patch_id, pb.patch_id);
        }
        // Distinct origins
        let mut seen = HashSet::new();
        for p in &a.patches {
            assert!(seen.insert(p.pixels.clone()));
        }
    }

    #[test]
    fn uniform_background_image_yields_no_patches() {
        let bg = [30u8, 30, 30];
        let img = Array3::from_elem((300, 300, 3), 30u8);
        let rec = record("k003", "AU", ViewKind::Surface, "s3");
        let cfg = PipelineConfig {
            patch_size: 256,
            patches_per_image: 3,
            background_color: Some(bg),
            ..PipelineConfig::default()
        };
        let report = extract_patches(&img, &rec, &cfg, 5).unwrap();
        assert!(report.patches.is_empty());
        assert!(report.rejected_background > 0);
        assert!(report.warning.is_some());
    }

    #[test]
    fn too_small_image_is_an_error_naming_the_image() {
        let img = noise_image(100, 300, 3);
        let rec = record("k004", "STR", ViewKind::Surface, "s4");
        let err = extract_patches(&img, &rec, &small_config(256, 1), 5).unwrap_err();
        assert!(err.to_string().contains("k004"));
    }

    #[test]
    fn balance_subsamples_oversupplied_group() {
        let patches: Vec<Patch> = (0..1500)
            .map(|i| test_patch(&format!("p{i}"), "WW", ViewKind::Surface, "s1"))
            .collect();
        let ids: HashSet<String> = patches.iter().map(|p| p.patch_id.clone()).collect();
        let (kept, deficits) = balance_classes(patches, 1000, 11);
        assert_eq!(kept.len(), 1000);
        assert!(deficits.is_empty());
        let kept_ids: HashSet<String> = kept.iter().map(|p| p.patch_id.clone()).collect();
        assert_eq!(kept_ids.len(), 1000);
        assert!(kept_ids.is_subset(&ids));
    }

    #[test]
    fn balance_keeps_exact_group_unchanged() {
        let patches: Vec<Patch> = (0..1000)
            .map(|i| test_patch(&format!("p{i}"), "WD", ViewKind::Section, "s1"))
            .collect();
        let expect: Vec<String> = patches.iter().map(|p| p.patch_id.clone()).collect();
        let (kept, deficits) = balance_classes(patches, 1000, 11);
        assert!(deficits.is_empty());
        let got: Vec<String> = kept.iter().map(|p| p.patch_id.clone()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn balance_reports_deficit_for_short_group() {
        let patches: Vec<Patch> = (0..700)
            .map(|i| test_patch(&format!("p{i}"), "CYS", ViewKind::Surface, "s1"))
            .collect();
        let (kept, deficits) = balance_classes(patches, 1000, 11);
        assert_eq!(kept.len(), 700);
        assert_eq!(
            deficits,
            vec![Deficit {
                class: StoneClass::from("CYS"),
                view: ViewKind::Surface,
                missing: 300
            }]
        );
    }

    #[test]
    fn split_ten_patches_gives_eight_two() {
        let patches: Vec<Patch> = (0..10)
            .map(|i| test_patch(&format!("p{i}"), "WW", ViewKind::Surface, &format!("s{i}")))
            .collect();
        let out = split_train_test(patches, 0.20, 3, false).unwrap();
        assert_eq!(out.train.len(), 8);
        assert_eq!(out.test.len(), 2);
        assert!(out.deviations.is_empty());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let mut patches = Vec::new();
        for c in ["WW", "WD"] {
            for v in ViewKind::ALL {
                for i in 0..50 {
                    patches.push(test_patch(&format!("{c}_{v}_{i}"), c, v, &format!("s{i}")));
                }
            }
        }
        let total = patches.len();
        let out = split_train_test(patches, 0.2, 17, false).unwrap();
        assert_eq!(out.train.len() + out.test.len(), total);
        let train_ids: HashSet<_> = out.train.iter().map(|p| p.patch_id.clone()).collect();
        let test_ids: HashSet<_> = out.test.iter().map(|p| p.patch_id.clone()).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        assert_eq!(out.test.len(), 40); // 4 strata x round(0.2*50)
    }

    #[test]
    fn tiny_stratum_is_an_error_naming_it() {
        let patches = vec![
            test_patch("a", "WW", ViewKind::Surface, "s1"),
            test_patch("b", "WD", ViewKind::Surface, "s1"),
            test_patch("c", "WD", ViewKind::Surface, "s2"),
        ];
        let err = split_train_test(patches, 0.2, 0, false).unwrap_err();
        assert!(err.to_string().contains("WW/surface"), "got: {err}");
    }

    #[test]
    fn leak_free_keeps_dominant_specimen_on_one_side() {
        // Specimen "big" owns 90% of the stratum.
        let mut patches: Vec<Patch> = (0..90)
            .map(|i| test_patch(&format!("big{i}"), "WW", ViewKind::Surface, "big"))
            .collect();
        for i in 0..10 {
            patches.push(test_patch(
                &format!("small{i}"),
                "WW",
                ViewKind::Surface,
                &format!("tiny{i}"),
            ));
        }
        let out = split_train_test(patches, 0.2, 23, true).unwrap();
        let big_in_train = out.train.iter().filter(|p| p.specimen_id == "big").count();
        let big_in_test = out.test.iter().filter(|p| p.specimen_id == "big").count();
        assert!(big_in_train == 0 || big_in_test == 0);
        // The 20-patch request cannot be met exactly either way.
        assert!(!out.deviations.is_empty());
    }

    #[test]
    fn leak_free_never_splits_a_specimen() {
        let mut patches = Vec::new();
        for c in ["WW", "WD", "AU"] {
            for s in 0..6 {
                for v in ViewKind::ALL {
                    for i in 0..4 {
                        patches.push(test_patch(
                            &format!("{c}{s}{v}{i}"),
                            c,
                            v,
                            &format!("{c}_spec{s}"),
                        ));
                    }
                }
            }
        }
        let out = split_train_test(patches, 0.25, 41, true).unwrap();
        let train_specs: HashSet<_> = out.train.iter().map(|p| p.specimen_id.clone()).collect();
        let test_specs: HashSet<_> = out.test.iter().map(|p| p.specimen_id.clone()).collect();
        assert!(train_specs.is_disjoint(&test_specs));
        assert!(!out.test.is_empty());
    }
}
