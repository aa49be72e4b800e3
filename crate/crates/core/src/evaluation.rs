//! Per-class precision/recall, confusion matrices, the per-view metric
//! suite, and feature export for external embedding visualization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_model::{ClassSet, StoneClass, ViewKind};
use crate::error::{Error, Result};
use crate::nets::{forward_features, MultiViewModel, SingleViewModel};
use crate::numeric::Scalar;
use crate::training::{
    argmax_row, predict_multi_view, predict_single_view, PatchDataset, PatchPair,
};

/// C x C count matrix; entry (t, p) counts test items of true class t
/// predicted as p. Class order is fixed by the class set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: ClassSet,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: ClassSet) -> Self {
        let c = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class][predicted] += 1;
    }

    pub fn from_pairs(classes: ClassSet, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = ConfusionMatrix::new(classes);
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

/// Per-class precision/recall plus support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: StoneClass,
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
    /// Set when no item was predicted as this class; precision is then
    /// defined as 0 so weighted averages stay total.
    pub precision_undefined: bool,
}

/// Metrics derived from one confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub accuracy: f64,
    pub total: u64,
}

/// Derives per-class and support-weighted metrics from a confusion matrix.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Eval("confusion matrix is all zeros".into()));
    }
    let c = cm.classes.len();
    let mut per_class = Vec::with_capacity(c);
    let mut weighted_precision = 0.0;
    let mut weighted_recall = 0.0;
    let mut diag = 0u64;
    let mut support_total = 0u64;
    for k in 0..c {
        let support = cm.row_sum(k);
        let predicted = cm.col_sum(k);
        let hits = cm.counts[k][k];
        diag += hits;
        let precision_undefined = predicted == 0;
        let precision = if precision_undefined {
            0.0
        } else {
            hits as f64 / predicted as f64
        };
        let recall = if support == 0 {
            0.0
        } else {
            hits as f64 / support as f64
        };
        weighted_precision += support as f64 * precision;
        weighted_recall += support as f64 * recall;
        support_total += support;
        per_class.push(ClassMetrics {
            class: cm.classes.labels()[k].clone(),
            precision,
            recall,
            support,
            precision_undefined,
        });
    }
    Ok(Metrics {
        per_class,
        weighted_precision: weighted_precision / support_total as f64,
        weighted_recall: weighted_recall / support_total as f64,
        accuracy: diag as f64 / total as f64,
        total,
    })
}

/// Argmax predictions (ties to the lowest class index) from probability rows.
pub fn predictions_from_probs<T: Scalar>(probs: &Array2<T>) -> Vec<usize> {
    (0..probs.dim().0).map(|r| argmax_row(probs, r)).collect()
}

/// Confusion matrix of a single-view model over dataset items.
pub fn confusion_single_view<T: Scalar>(
    model: &SingleViewModel<T>,
    dataset: &PatchDataset<T>,
    indices: &[usize],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    if indices.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let probs = predict_single_view(model, dataset, indices, batch_size)?;
    let preds = predictions_from_probs(&probs);
    Ok(ConfusionMatrix::from_pairs(
        dataset.class_set.clone(),
        indices
            .iter()
            .map(|&i| dataset.items[i].class_code)
            .zip(preds),
    ))
}

/// Confusion matrix of a multi-view model over pairs.
pub fn confusion_multi_view<T: Scalar>(
    model: &MultiViewModel<T>,
    dataset: &PatchDataset<T>,
    pairs: &[PatchPair],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    if pairs.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let probs = predict_multi_view(model, dataset, pairs, batch_size)?;
    let preds = predictions_from_probs(&probs);
    Ok(ConfusionMatrix::from_pairs(
        dataset.class_set.clone(),
        pairs.iter().map(|p| p.label_code).zip(preds),
    ))
}

/// Evaluation context of one report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalContext {
    SurfaceOnly,
    SectionOnly,
    Mixed,
    Paired,
}

impl EvalContext {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalContext::SurfaceOnly => "surface-only",
            EvalContext::SectionOnly => "section-only",
            EvalContext::Mixed => "mixed",
            EvalContext::Paired => "paired",
        }
    }
}

/// One row of the evaluation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub context: EvalContext,
    pub metrics: Metrics,
    pub confusion: Vec<Vec<u64>>,
    pub seed: u64,
    pub toolkit_version: String,
}

/// The full suite: per-model, per-context rows plus warnings for omitted
/// contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub toolkit_version: String,
    pub pairing_seed: u64,
    pub rows: Vec<MetricsReport>,
    /// For each single-view model, the support-weighted average of its
    /// surface and section rows: the alternative reading of the mixed
    /// column, printed alongside the union evaluation.
    pub sv_view_weighted_mixed: Vec<ViewWeightedMixed>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewWeightedMixed {
    pub model_id: String,
    pub precision: f64,
    pub recall: f64,
}

/// Evaluates the available models on the test data: single-view models on
/// surface-only, section-only and mixed (union) subsets, multi-view models
/// on paired items. Missing contexts are skipped with a warning.
pub fn evaluate_suite<T: Scalar>(
    sv_model: Option<(&SingleViewModel<T>, &str)>,
    mv_model: Option<(&MultiViewModel<T>, &str)>,
    dataset: &PatchDataset<T>,
    pairs: &[PatchPair],
    pairing_seed: u64,
    batch_size: usize,
) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut sv_view_weighted_mixed = Vec::new();

    if let Some((mv, model_id)) = mv_model {
        if pairs.is_empty() {
            warnings.push(format!("{model_id}: no pairs available, paired row omitted"));
        } else {
            let cm = confusion_multi_view(mv, dataset, pairs, batch_size)?;
            rows.push(MetricsReport {
                model_id: model_id.to_string(),
                context: EvalContext::Paired,
                metrics: metrics_from_confusion(&cm)?,
                confusion: cm.counts.clone(),
                seed: pairing_seed,
                toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            });
        }
    }

    if let Some((sv, model_id)) = sv_model {
        let mut per_view: Vec<(EvalContext, Vec<usize>)> = vec![
            (
                EvalContext::SurfaceOnly,
                dataset.indices_of_view(ViewKind::Surface),
            ),
            (
                EvalContext::SectionOnly,
                dataset.indices_of_view(ViewKind::Section),
            ),
            (EvalContext::Mixed, (0..dataset.len()).collect()),
        ];
        let mut view_rows: Vec<&MetricsReport> = Vec::new();
        for (context, indices) in per_view.drain(..) {
            if indices.is_empty() {
                warnings.push(format!(
                    "{model_id}: no {} items, row omitted",
                    context.as_str()
                ));
                continue;
            }
            let cm = confusion_single_view(sv, dataset, &indices, batch_size)?;
            rows.push(MetricsReport {
                model_id: model_id.to_string(),
                context,
                metrics: metrics_from_confusion(&cm)?,
                confusion: cm.counts.clone(),
                seed: pairing_seed,
                toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            });
        }
        // Alternative mixed reading: support-weighted mean of the two
        // single-view rows.
        for row in &rows {
            if row.model_id == model_id
                && matches!(
                    row.context,
                    EvalContext::SurfaceOnly | EvalContext::SectionOnly
                )
            {
                view_rows.push(row);
            }
        }
        if view_rows.len() == 2 {
            let total: u64 = view_rows.iter().map(|r| r.metrics.total).sum();
            let wp = view_rows
                .iter()
                .map(|r| r.metrics.weighted_precision * r.metrics.total as f64)
                .sum::<f64>()
                / total as f64;
            let wr = view_rows
                .iter()
                .map(|r| r.metrics.weighted_recall * r.metrics.total as f64)
                .sum::<f64>()
                / total as f64;
            sv_view_weighted_mixed.push(ViewWeightedMixed {
                model_id: model_id.to_string(),
                precision: wp,
                recall: wr,
            });
        }
    }

    Ok(SuiteReport {
        toolkit_version: crate::TOOLKIT_VERSION.to_string(),
        pairing_seed,
        rows,
        sv_view_weighted_mixed,
        warnings,
    })
}

impl SuiteReport {
    /// Aligned-text rendering: one line per model, surface/section/mixed
    /// columns; multi-view models carry only the mixed column.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>9} {:>7} {:>9} {:>7} {:>9} {:>7}",
            "classifier", "surf P", "R", "sect P", "R", "mixed P", "R"
        );
        let mut models: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !models.contains(&row.model_id.as_str()) {
                models.push(&row.model_id);
            }
        }
        for model in models {
            let find = |ctx: EvalContext| {
                self.rows
                    .iter()
                    .find(|r| r.model_id == model && r.context == ctx)
            };
            let fmt = |row: Option<&MetricsReport>, recall: bool| match row {
                Some(r) => format!(
                    "{:.3}",
                    if recall {
                        r.metrics.weighted_recall
                    } else {
                        r.metrics.weighted_precision
                    }
                ),
                None => "-".to_string(),
            };
            let mixed = find(EvalContext::Mixed).or_else(|| find(EvalContext::Paired));
            let _ = writeln!(
                out,
                "{:<24} {:>9} {:>7} {:>9} {:>7} {:>9} {:>7}",
                model,
                fmt(find(EvalContext::SurfaceOnly), false),
                fmt(find(EvalContext::SurfaceOnly), true),
                fmt(find(EvalContext::SectionOnly), false),
                fmt(find(EvalContext::SectionOnly), true),
                fmt(mixed, false),
                fmt(mixed, true),
            );
        }
        for alt in &self.sv_view_weighted_mixed {
            let _ = writeln!(
                out,
                "note: {} view-weighted mixed P {:.3} R {:.3} (support-weighted mean of the per-view rows)",
                alt.model_id, alt.precision, alt.recall
            );
        }
        for warning in &self.warnings {
            let _ = writeln!(out, "warning: {warning}");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes one CSV row per item: id, true class, view/context, then the
/// feature values. Single-view models export the extractor output (D
/// columns); multi-view models the post-fusion vector (D' columns).
pub fn export_features_single_view<T: Scalar>(
    model: &SingleViewModel<T>,
    dataset: &PatchDataset<T>,
    indices: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::new();
    for chunk in indices.chunks(64) {
        let (batch, _) = dataset.batch(chunk);
        let features = forward_features(&model.extractor, &batch)?;
        for (row, &idx) in chunk.iter().enumerate() {
            let item = &dataset.items[idx];
            write_feature_row(
                &mut out,
                &item.patch_id,
                dataset.class_set.labels()[item.class_code].as_str(),
                item.view.as_str(),
                features.row(row).iter().map(|v| v.as_f64()),
            );
        }
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Multi-view export: one row per pair, id `surface_id+section_id`.
pub fn export_features_multi_view<T: Scalar>(
    model: &MultiViewModel<T>,
    dataset: &PatchDataset<T>,
    pairs: &[PatchPair],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::new();
    for chunk in pairs.chunks(64) {
        let surface_idx: Vec<usize> = chunk.iter().map(|p| p.surface).collect();
        let section_idx: Vec<usize> = chunk.iter().map(|p| p.section).collect();
        let (surface, _) = dataset.batch(&surface_idx);
        let (section, _) = dataset.batch(&section_idx);
        let fused = model.fused_features(&surface, &section)?;
        for (row, pair) in chunk.iter().enumerate() {
            let sid = &dataset.items[pair.surface].patch_id;
            let cid = &dataset.items[pair.section].patch_id;
            write_feature_row(
                &mut out,
                &format!("{sid}+{cid}"),
                dataset.class_set.labels()[pair.label_code].as_str(),
                "paired",
                fused.row(row).iter().map(|v| v.as_f64()),
            );
        }
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_feature_row(
    out: &mut String,
    id: &str,
    class: &str,
    context: &str,
    values: impl Iterator<Item = f64>,
) {
    out.push_str(id);
    out.push(',');
    out.push_str(class);
    out.push(',');
    out.push_str(context);
    for v in values {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand::Rng;

    fn two_class_set() -> ClassSet {
        ClassSet::new(vec![StoneClass::from("WW"), StoneClass::from("WD")]).unwrap()
    }

    #[test]
    fn perfect_predictions_give_diagonal_matrix() {
        let truth_pred = (0..20).map(|i| (i % 2, i % 2));
        let cm = ConfusionMatrix::from_pairs(two_class_set(), truth_pred);
        assert_eq!(cm.counts, vec![vec![10, 0], vec![0, 10]]);
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!(m.weighted_precision, 1.0);
        assert_eq!(m.weighted_recall, 1.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn constant_predictor_fills_column_zero() {
        let truth_pred = (0..20).map(|i| (i % 2, 0));
        let cm = ConfusionMatrix::from_pairs(two_class_set(), truth_pred);
        assert_eq!(cm.col_sum(0), 20);
        assert_eq!(cm.col_sum(1), 0);
        let m = metrics_from_confusion(&cm).unwrap();
        assert!(m.per_class[1].precision_undefined);
        assert_eq!(m.per_class[1].precision, 0.0);
    }

    #[test]
    fn random_six_class_predictions_hit_chance_accuracy() {
        let classes = ClassSet::reference();
        let mut rng = rng_for(2024);
        let truth_pred: Vec<(usize, usize)> = (0..600)
            .map(|i| (i % 6, rng.random_range(0..6)))
            .collect();
        let cm = ConfusionMatrix::from_pairs(classes, truth_pred);
        let m = metrics_from_confusion(&cm).unwrap();
        // Binomial n=600, p=1/6: 4 percentage points is about 2.6 sigma.
        assert!((m.accuracy - 1.0 / 6.0).abs() < 0.04, "acc {}", m.accuracy);
    }

    #[test]
    fn hand_checked_two_class_metrics() {
        let cm = ConfusionMatrix {
            classes: two_class_set(),
            counts: vec![vec![3, 1], vec![2, 4]],
        };
        let m = metrics_from_confusion(&cm).unwrap();
        assert!((m.per_class[0].precision - 0.6).abs() < 1e-12);
        assert!((m.per_class[0].recall - 0.75).abs() < 1e-12);
        assert!((m.per_class[1].precision - 0.8).abs() < 1e-12);
        assert!((m.per_class[1].recall - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.weighted_precision - 0.72).abs() < 1e-12);
    }

    #[test]
    fn single_class_matrix() {
        let classes = ClassSet::new(vec![StoneClass::from("WW")]).unwrap();
        let cm = ConfusionMatrix {
            classes,
            counts: vec![vec![7]],
        };
        let m = metrics_from_confusion(&cm).unwrap();
        assert_eq!(m.weighted_precision, 1.0);
        assert_eq!(m.weighted_recall, 1.0);
    }

    #[test]
    fn all_zero_matrix_is_an_error() {
        let cm = ConfusionMatrix::new(two_class_set());
        assert!(metrics_from_confusion(&cm).is_err());
    }

    #[test]
    fn text_table_gives_mv_rows_only_mixed_columns() {
        let metrics = |p: f64, r: f64| Metrics {
            per_class: vec![],
            weighted_precision: p,
            weighted_recall: r,
            accuracy: p,
            total: 10,
        };
        let row = |model: &str, context: EvalContext, p: f64, r: f64| MetricsReport {
            model_id: model.to_string(),
            context,
            metrics: metrics(p, r),
            confusion: vec![],
            seed: 1,
            toolkit_version: crate::TOOLKIT_VERSION.to_string(),
        };
        let report = SuiteReport {
            toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            pairing_seed: 1,
            rows: vec![
                row("MV-mini-max", EvalContext::Paired, 0.95, 0.94),
                row("SV-mini", EvalContext::SurfaceOnly, 0.77, 0.71),
                row("SV-mini", EvalContext::SectionOnly, 0.88, 0.87),
                row("SV-mini", EvalContext::Mixed, 0.84, 0.83),
            ],
            sv_view_weighted_mixed: vec![],
            warnings: vec![],
        };
        let text = report.render_text();
        let mv_line = text.lines().find(|l| l.starts_with("MV-mini-max")).unwrap();
        // Surface and section columns stay empty for multi-view rows.
        let columns: Vec<&str> = mv_line.split_whitespace().collect();
        assert_eq!(&columns[1..5], &["-", "-", "-", "-"], "line: {mv_line}");
        assert!(mv_line.contains("0.950") && mv_line.contains("0.940"));
        let sv_line = text.lines().find(|l| l.starts_with("SV-mini")).unwrap();
        assert!(sv_line.contains("0.770") && sv_line.contains("0.880") && sv_line.contains("0.840"));
    }

    #[test]
    fn feature_export_writes_one_row_per_item_and_is_deterministic() {
        use crate::nets::{build_backbone, build_head, BackboneConfig, HeadConfig};
        use crate::training::grating_patch;

        let class_set = two_class_set();
        let mut patches = Vec::new();
        for i in 0..10 {
            patches.push(grating_patch(
                &format!("p{i}"),
                &class_set.labels()[i % 2],
                i % 2,
                if i % 2 == 0 { ViewKind::Surface } else { ViewKind::Section },
                "s0",
                64,
                0.2 * i as f64,
                40 + i as u64,
            ));
        }
        let dataset =
            crate::training::PatchDataset::<f32>::from_patches(&patches, &class_set, 1e-6).unwrap();
        let extractor = build_backbone::<f32>(&BackboneConfig::mini(), 41).unwrap();
        let head = build_head::<f32>(128, 2, &HeadConfig::default_for(2), 42).unwrap();
        let model = SingleViewModel { extractor, head };
        let indices: Vec<usize> = (0..10).collect();

        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.csv");
        let path_b = dir.path().join("b.csv");
        export_features_single_view(&model, &dataset, &indices, &path_a).unwrap();
        export_features_single_view(&model, &dataset, &indices, &path_b).unwrap();
        let body = std::fs::read_to_string(&path_a).unwrap();
        assert_eq!(body.lines().count(), 10);
        for line in body.lines() {
            assert_eq!(line.split(',').count(), 3 + 128);
        }
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );
    }

    #[test]
    fn suite_omits_missing_contexts_with_a_warning() {
        use crate::nets::{build_backbone, build_head, BackboneConfig, HeadConfig};
        use crate::training::grating_patch;

        let class_set = two_class_set();
        // Surface patches only: the section row must be skipped, not fail.
        let patches: Vec<_> = (0..6)
            .map(|i| {
                grating_patch(
                    &format!("p{i}"),
                    &class_set.labels()[i % 2],
                    i % 2,
                    ViewKind::Surface,
                    "s0",
                    64,
                    0.3 * i as f64,
                    50 + i as u64,
                )
            })
            .collect();
        let dataset =
            crate::training::PatchDataset::<f32>::from_patches(&patches, &class_set, 1e-6).unwrap();
        let extractor = build_backbone::<f32>(&BackboneConfig::mini(), 51).unwrap();
        let head = build_head::<f32>(128, 2, &HeadConfig::default_for(2), 52).unwrap();
        let model = SingleViewModel { extractor, head };

        let report = evaluate_suite(
            Some((&model, "SV-mini")),
            None::<(&crate::nets::MultiViewModel<f32>, &str)>,
            &dataset,
            &[],
            9,
            8,
        )
        .unwrap();
        let contexts: Vec<EvalContext> = report.rows.iter().map(|r| r.context).collect();
        assert!(contexts.contains(&EvalContext::SurfaceOnly));
        assert!(contexts.contains(&EvalContext::Mixed));
        assert!(!contexts.contains(&EvalContext::SectionOnly));
        assert!(report.warnings.iter().any(|w| w.contains("section-only")));
        // No second view: the view-weighted mixed footnote cannot be formed.
        assert!(report.sv_view_weighted_mixed.is_empty());
    }

    #[test]
    fn weighted_metrics_stay_within_per_class_bounds() {
        let mut rng = rng_for(7);
        for _ in 0..200 {
            let c = rng.random_range(2..=6usize);
            let labels: Vec<StoneClass> = (0..c)
                .map(|i| StoneClass::from(format!("C{i}").as_str()))
                .collect();
            let classes = ClassSet::new(labels).unwrap();
            let pairs: Vec<(usize, usize)> = (0..rng.random_range(10..200usize))
                .map(|_| (rng.random_range(0..c), rng.random_range(0..c)))
                .collect();
            let cm = ConfusionMatrix::from_pairs(classes, pairs);
            if cm.total() == 0 {
                continue;
            }
            let m = metrics_from_confusion(&cm).unwrap();
            let lo = m.per_class.iter().map(|p| p.precision).fold(f64::MAX, f64::min);
            let hi = m.per_class.iter().map(|p| p.precision).fold(f64::MIN, f64::max);
            assert!(m.weighted_precision >= lo - 1e-12 && m.weighted_precision <= hi + 1e-12);
        }
    }
}
