//! End-to-end orchestration: training, evaluation, single-image inference
//! and the speed/accuracy benchmark sweep.
//!
//! The stage order at training time is: descriptor pool sampling over known
//! training images, k-means codebook, kd-tree index, per-image feature
//! extraction (preprocess, dense descriptors, LLC codes, pyramid pooling),
//! one-vs-all SVM training, first-stage confidence MLP, second-stage MLP
//! over known + unknown classes when unknown training images exist, and
//! finally threshold tuning on the validation split. Unknown images feed
//! only the second-stage MLP and the threshold search — never the codebook
//! or the SVMs.
//!
//! All stage seeds derive from the single config seed, so one (corpus,
//! config, seed) triple maps to one byte-identical model bundle and one
//! evaluation report (timings aside). Everything runs single-threaded for
//! comparable per-image timings.

pub mod bundle;
pub mod config;
pub mod dataset;
pub mod toy;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codebook::{kmeans, sample_pool};
use crate::descriptor::extract_dense;
use crate::encoding::{encode_image, spm_pool, PooledFeature};
use crate::error::{Error, Result};
use crate::image::{load_gray, preprocess};
use crate::kdtree::{build_kdtree, KdTree};
use crate::mlp::{mlp_train, MlpTrainConfig};
use crate::openset::{route_scores, tune_thresholds, ClassificationResult, OpenSetConfig};
use crate::svm::{svm_score, svm_train};

pub use bundle::{load_bundle, save_bundle, ModelBundle};
pub use config::{load_config, PipelineConfig};
pub use dataset::{ingest_dataset, DatasetManifest};
pub use toy::make_toy_corpus;

// Stage tags for deriving independent component seeds from the master seed.
const SEED_POOL: u64 = 1;
const SEED_KMEANS: u64 = 2;
const SEED_SVM: u64 = 3;
const SEED_MLP1: u64 = 4;
const SEED_MLP2: u64 = 5;

fn derive_seed(master: u64, stage: u64) -> u64 {
    // Distinct odd multiplier per stage; any fixed injection works, the
    // point is that stages never share an RNG stream.
    master ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Wall-clock seconds per inference stage. Image loading is counted with
/// preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess: f64,
    pub descriptors: f64,
    pub encoding: f64,
    pub pooling: f64,
    pub classification: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.preprocess + self.descriptors + self.encoding + self.pooling + self.classification
    }

    fn accumulate(&mut self, other: &StageTimings) {
        self.preprocess += other.preprocess;
        self.descriptors += other.descriptors;
        self.encoding += other.encoding;
        self.pooling += other.pooling;
        self.classification += other.classification;
    }

    fn per_image(&self, n: usize) -> StageTimings {
        let n = n.max(1) as f64;
        StageTimings {
            preprocess: self.preprocess / n,
            descriptors: self.descriptors / n,
            encoding: self.encoding / n,
            pooling: self.pooling / n,
            classification: self.classification / n,
        }
    }
}

/// Evaluation summary: confusion counts, accuracies and mean per-image
/// stage timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `confusion[true_id][predicted_id]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Diagonal over row sum; 0 for classes without test images.
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    /// Mean of per-class accuracies over classes that have test images.
    pub mean_per_class_accuracy: f64,
    pub num_images: usize,
    pub timing: StageTimings,
}

impl EvalReport {
    /// Render the report as aligned text with the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.class_names.iter().map(|n| n.len()).max().unwrap_or(4).max(5);
        out.push_str(&format!(
            "images: {}   overall accuracy: {:.4}   mean per-class: {:.4}\n\n",
            self.num_images, self.overall_accuracy, self.mean_per_class_accuracy
        ));
        out.push_str(&format!("{:>width$}  {:>8}  rows = truth, columns = prediction\n", "class", "acc"));
        for (i, name) in self.class_names.iter().enumerate() {
            let row: Vec<String> = self.confusion[i].iter().map(|c| format!("{c:4}")).collect();
            out.push_str(&format!(
                "{name:>width$}  {:>8.4}  [{}]\n",
                self.per_class_accuracy[i],
                row.join(" ")
            ));
        }
        out.push_str(&format!(
            "\nmean seconds/image: preprocess {:.4}  descriptors {:.4}  encoding {:.4}  pooling {:.4}  classification {:.4}\n",
            self.timing.preprocess,
            self.timing.descriptors,
            self.timing.encoding,
            self.timing.pooling,
            self.timing.classification
        ));
        out
    }

    /// Confusion matrix as CSV with a header row and one leading label
    /// column per row.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("class");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            out.push_str(name);
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Build the report from tallied predictions.
fn tally_report(
    class_names: Vec<String>,
    confusion: Vec<Vec<usize>>,
    timing: StageTimings,
    num_images: usize,
) -> EvalReport {
    let mut diag = 0usize;
    let mut total = 0usize;
    let mut per_class = Vec::with_capacity(confusion.len());
    let mut mean_sum = 0.0;
    let mut mean_n = 0usize;
    for (i, row) in confusion.iter().enumerate() {
        let row_sum: usize = row.iter().sum();
        diag += row[i];
        total += row_sum;
        if row_sum > 0 {
            let acc = row[i] as f64 / row_sum as f64;
            per_class.push(acc);
            mean_sum += acc;
            mean_n += 1;
        } else {
            per_class.push(0.0);
        }
    }
    EvalReport {
        class_names,
        confusion,
        per_class_accuracy: per_class,
        overall_accuracy: if total > 0 { diag as f64 / total as f64 } else { 0.0 },
        mean_per_class_accuracy: if mean_n > 0 { mean_sum / mean_n as f64 } else { 0.0 },
        num_images,
        timing,
    }
}

/// A bundle with its nearest-basis index rebuilt, ready for inference.
pub struct Predictor<'a> {
    pub bundle: &'a ModelBundle,
    tree: KdTree,
}

impl<'a> Predictor<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Result<Self> {
        let tree = build_kdtree(&bundle.codebook, bundle.config.leaf_capacity)?;
        Ok(Predictor { bundle, tree })
    }

    /// Load an image and run it through preprocessing, descriptors, LLC
    /// encoding and pyramid pooling, timing each stage.
    pub fn feature(&self, path: &Path) -> Result<(PooledFeature, StageTimings)> {
        let cfg = &self.bundle.config;
        let mut t = StageTimings::default();

        let start = Instant::now();
        let mut img = load_gray(path)?;
        if cfg.preprocess_enabled {
            img = preprocess(&img, &cfg.preprocess)?;
        }
        t.preprocess = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let descriptors = extract_dense(&img, &cfg.descriptor)?;
        t.descriptors = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let encoded = encode_image(&descriptors, &self.bundle.codebook, &self.tree, &cfg.llc)?;
        t.encoding = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let feature = spm_pool(&encoded, img.width(), img.height(), self.bundle.codebook.len(), &cfg.pyramid)?;
        t.pooling = start.elapsed().as_secs_f64();

        Ok((feature, t))
    }

    /// Score and route an already pooled feature.
    pub fn classify_feature(&self, feature: &PooledFeature) -> Result<(ClassificationResult, f64)> {
        let start = Instant::now();
        let scores = svm_score(&self.bundle.svm, feature)?;
        let result =
            route_scores(&scores, &self.bundle.mlp1, self.bundle.mlp2.as_ref(), &self.bundle.openset)?;
        Ok((result, start.elapsed().as_secs_f64()))
    }

    /// Full inference on one image path.
    pub fn classify_path(&self, path: &Path) -> Result<(ClassificationResult, StageTimings)> {
        let (feature, mut t) = self.feature(path)?;
        let (result, secs) = self.classify_feature(&feature)?;
        t.classification = secs;
        Ok((result, t))
    }
}

/// Extract pooled features for a list of images, preserving order.
fn features_for(predictor: &TrainPredictor, paths: &[&PathBuf]) -> Result<Vec<PooledFeature>> {
    let mut out = Vec::with_capacity(paths.len());
    for (i, path) in paths.iter().enumerate() {
        out.push(predictor.feature(path)?.0);
        if (i + 1) % 100 == 0 {
            log::info!("  features: {}/{} images", i + 1, paths.len());
        }
    }
    Ok(out)
}

fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Train everything and assemble the bundle. See the module docs for the
/// stage order and the seeding scheme.
pub fn train_full(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let num_known = manifest.num_known();
    let num_total = manifest.num_classes();
    if num_known < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 known classes, got {num_known}"
        )));
    }
    for (id, class) in manifest.classes.iter().take(num_known).enumerate() {
        if class.train.is_empty() {
            return Err(Error::EmptyClass { class: id });
        }
    }

    // Pin the derived stage seeds into the stored config so the bundle
    // records exactly what ran.
    let mut cfg = cfg.clone();
    cfg.kmeans.seed = derive_seed(cfg.seed, SEED_KMEANS);
    cfg.svm.seed = derive_seed(cfg.seed, SEED_SVM);
    cfg.mlp.seed = derive_seed(cfg.seed, SEED_MLP1);
    let pre = cfg.preprocess_enabled.then_some(&cfg.preprocess);

    let known_train: Vec<PathBuf> = manifest
        .classes
        .iter()
        .take(num_known)
        .flat_map(|c| c.train.iter().cloned())
        .collect();
    log::info!(
        "sampling up to {} descriptors from {} training images",
        cfg.pool_target,
        known_train.len()
    );
    let pool = sample_pool(
        &known_train,
        &cfg.descriptor,
        pre,
        cfg.pool_target,
        derive_seed(cfg.seed, SEED_POOL),
    )?;

    log::info!("k-means: {} centers over {} descriptors", cfg.kmeans.m, pool.descriptors.len());
    let codebook = kmeans(&pool.descriptors, &cfg.kmeans)?;
    let predictor = TrainPredictor {
        codebook: &codebook,
        cfg: &cfg,
        tree: build_kdtree(&codebook, cfg.leaf_capacity)?,
    };

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (id, class) in manifest.classes.iter().take(num_known).enumerate() {
        log::info!("features for class {:?} ({} images)", class.name, class.train.len());
        let paths: Vec<&PathBuf> = class.train.iter().collect();
        features.extend(features_for(&predictor, &paths)?);
        labels.extend(std::iter::repeat_n(id, class.train.len()));
    }

    log::info!("training {} one-vs-all SVMs", num_known);
    let svm = svm_train(&features, &labels, num_known, &cfg.svm)?;

    let train_scores: Vec<Vec<f64>> =
        features.iter().map(|f| svm_score(&svm, f)).collect::<Result<_>>()?;
    let targets1: Vec<Vec<f64>> = labels.iter().map(|&l| one_hot(l, num_known)).collect();
    let mut arch1 = vec![num_known];
    arch1.extend(&cfg.mlp_hidden);
    arch1.push(num_known);
    log::info!("training stage-1 confidence MLP {arch1:?}");
    let mlp1 = mlp_train(&train_scores, &targets1, &arch1, &cfg.mlp)?;

    let unknown_train: Vec<(usize, &PathBuf)> = manifest
        .classes
        .iter()
        .enumerate()
        .skip(num_known)
        .flat_map(|(id, c)| c.train.iter().map(move |p| (id, p)))
        .collect();

    let mlp2 = if unknown_train.is_empty() {
        log::warn!("no unknown-class training images; open-set routing disabled (known-only mode)");
        None
    } else {
        let paths: Vec<&PathBuf> = unknown_train.iter().map(|(_, p)| *p).collect();
        log::info!("features for {} unknown-class images", paths.len());
        let unknown_features = features_for(&predictor, &paths)?;
        let mut inputs = train_scores;
        let mut targets2: Vec<Vec<f64>> = labels.iter().map(|&l| one_hot(l, num_total)).collect();
        for ((id, _), f) in unknown_train.iter().zip(&unknown_features) {
            inputs.push(svm_score(&svm, f)?);
            targets2.push(one_hot(*id, num_total));
        }
        let mut arch2 = vec![num_known];
        arch2.extend(&cfg.mlp_hidden);
        arch2.push(num_total);
        log::info!("training stage-2 MLP {arch2:?} over {} classes", num_total);
        let mlp_cfg = MlpTrainConfig { seed: derive_seed(cfg.seed, SEED_MLP2), ..cfg.mlp.clone() };
        Some(mlp_train(&inputs, &targets2, &arch2, &mlp_cfg)?)
    };

    // Validation scores for threshold tuning, known and unknown alike.
    let mut scores_cache: Vec<(Vec<f64>, usize)> = Vec::new();
    if mlp2.is_some() {
        for (id, class) in manifest.classes.iter().enumerate() {
            for path in &class.val {
                let (f, _) = predictor.feature(path)?;
                scores_cache.push((svm_score(&svm, &f)?, id));
            }
        }
    }
    drop(predictor);

    let unknown_ids: BTreeSet<usize> = manifest.unknown_ids();
    let (t1, t2) = match &mlp2 {
        Some(mlp2) if scores_cache.iter().any(|(_, l)| unknown_ids.contains(l)) => {
            log::info!("tuning thresholds on {} validation samples", scores_cache.len());
            tune_thresholds(&scores_cache, &mlp1, mlp2, &unknown_ids, cfg.tune_grid_step)?
        }
        Some(_) => {
            log::warn!(
                "no unknown validation images; keeping configured thresholds t1={} t2={}",
                cfg.t1,
                cfg.t2
            );
            (cfg.t1, cfg.t2)
        }
        None => (cfg.t1, cfg.t2),
    };

    Ok(ModelBundle {
        config: cfg,
        class_names: manifest.class_names(),
        num_known,
        codebook,
        svm,
        mlp1,
        mlp2,
        openset: OpenSetConfig { t1, t2, unknown_ids },
    })
}

/// Carries just enough state to build features during training, before the
/// full bundle exists.
struct TrainPredictor<'a> {
    codebook: &'a crate::codebook::Codebook,
    cfg: &'a PipelineConfig,
    tree: KdTree,
}

impl TrainPredictor<'_> {
    fn feature(&self, path: &Path) -> Result<(PooledFeature, StageTimings)> {
        let cfg = self.cfg;
        let mut img = load_gray(path)?;
        if cfg.preprocess_enabled {
            img = preprocess(&img, &cfg.preprocess)?;
        }
        let descriptors = extract_dense(&img, &cfg.descriptor)?;
        let encoded = encode_image(&descriptors, self.codebook, &self.tree, &cfg.llc)?;
        let feature = spm_pool(&encoded, img.width(), img.height(), self.codebook.len(), &cfg.pyramid)?;
        Ok((feature, StageTimings::default()))
    }
}

/// Run the inference path over the manifest's test split and tally the
/// confusion matrix.
pub fn evaluate(bundle: &ModelBundle, manifest: &DatasetManifest) -> Result<EvalReport> {
    let num_images: usize = manifest.classes.iter().map(|c| c.test.len()).sum();
    if num_images == 0 {
        return Err(Error::EmptyTestSplit);
    }
    // Map manifest classes into bundle ids by name before touching pixels.
    let ids: Vec<usize> = manifest
        .classes
        .iter()
        .map(|c| {
            bundle
                .class_names
                .iter()
                .position(|n| n == &c.name)
                .ok_or_else(|| Error::UnknownTestLabel { label: c.name.clone() })
        })
        .collect::<Result<_>>()?;

    let predictor = Predictor::new(bundle)?;
    let c_total = bundle.class_names.len();
    let mut confusion = vec![vec![0usize; c_total]; c_total];
    let mut time_sum = StageTimings::default();
    for (class, &bid) in manifest.classes.iter().zip(&ids) {
        for path in &class.test {
            let (result, t) = predictor.classify_path(path)?;
            confusion[bid][result.label] += 1;
            time_sum.accumulate(&t);
        }
    }
    Ok(tally_report(
        bundle.class_names.clone(),
        confusion,
        time_sum.per_image(num_images),
        num_images,
    ))
}

/// Classify a single image, returning the decision and per-stage seconds.
pub fn classify_one(bundle: &ModelBundle, image: &Path) -> Result<(ClassificationResult, StageTimings)> {
    Predictor::new(bundle)?.classify_path(image)
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub max_comparisons: Option<usize>,
    pub feature_len: usize,
    pub overall_accuracy: f64,
    pub mean_encode_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Directional observations about the measured trends; informational,
    /// the hard guarantees live in the test suite.
    pub notes: Vec<String>,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("    M  budget  feat_len  accuracy  encode s/img\n");
        for r in &self.rows {
            let budget =
                r.max_comparisons.map_or_else(|| "exact".to_string(), |b| b.to_string());
            out.push_str(&format!(
                "{:5}  {:>6}  {:8}  {:8.4}  {:12.5}\n",
                r.m, budget, r.feature_len, r.overall_accuracy, r.mean_encode_seconds
            ));
        }
        for note in &self.notes {
            out.push_str(&format!("note: {note}\n"));
        }
        out
    }
}

/// Train and evaluate one bundle per sweep point, then time encoding over
/// the test split `reps` times per point. Rows keep the requested order.
pub fn benchmark_sweep(
    manifest: &DatasetManifest,
    base: &PipelineConfig,
    sweep: &[(usize, Option<usize>)],
    reps: usize,
) -> Result<SweepReport> {
    if sweep.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least 2 points".into()));
    }
    if reps == 0 {
        return Err(Error::InvalidArgument("benchmark needs reps >= 1".into()));
    }
    let test_paths: Vec<&PathBuf> = manifest.classes.iter().flat_map(|c| c.test.iter()).collect();
    if test_paths.is_empty() {
        return Err(Error::EmptyTestSplit);
    }

    let mut rows = Vec::with_capacity(sweep.len());
    for &(m, max_comparisons) in sweep {
        let mut cfg = base.clone();
        cfg.kmeans.m = m;
        cfg.llc.max_comparisons = max_comparisons;
        log::info!("sweep point: M={m}, budget={max_comparisons:?}");
        let bundle = train_full(manifest, &cfg)?;
        let report = evaluate(&bundle, manifest)?;

        let predictor = Predictor::new(&bundle)?;
        let mut encode_sum = 0.0;
        for _ in 0..reps {
            for path in &test_paths {
                encode_sum += predictor.feature(path)?.1.encoding;
            }
        }
        rows.push(SweepRow {
            m,
            max_comparisons,
            feature_len: cfg.feature_len(),
            overall_accuracy: report.overall_accuracy,
            mean_encode_seconds: encode_sum / (reps * test_paths.len()) as f64,
        });
    }

    let mut notes = Vec::new();
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            let (a, b) = (&rows[i], &rows[j]);
            // Compare pairs where exactly one knob grows (None = unbounded
            // counts as the largest budget).
            let budget = |r: &SweepRow| r.max_comparisons.map_or(usize::MAX, |v| v);
            if a.m == b.m && budget(a) < budget(b) {
                notes.push(format!(
                    "M={}: budget {:?} -> {:?} changes encode time {:.5}s -> {:.5}s, accuracy {:.4} -> {:.4}",
                    a.m, a.max_comparisons, b.max_comparisons,
                    a.mean_encode_seconds, b.mean_encode_seconds,
                    a.overall_accuracy, b.overall_accuracy
                ));
            }
            if budget(a) == budget(b) && a.m < b.m {
                notes.push(format!(
                    "budget {:?}: M {} -> {} changes encode time {:.5}s -> {:.5}s, accuracy {:.4} -> {:.4}",
                    a.max_comparisons, a.m, b.m,
                    a.mean_encode_seconds, b.mean_encode_seconds,
                    a.overall_accuracy, b.overall_accuracy
                ));
            }
        }
    }
    Ok(SweepReport { rows, notes })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Codebook;
    use crate::image::GrayImage;
    use crate::mlp::MlpModel;
    use crate::svm::LinearSvmModel;
    use std::sync::OnceLock;
    use tempfile::TempDir;

    // -- tally_report ------------------------------------------------------

    #[test]
    fn forced_correct_predictions_give_a_diagonal_matrix() {
        let confusion = vec![vec![3, 0], vec![0, 2]];
        let r = tally_report(vec!["a".into(), "b".into()], confusion, StageTimings::default(), 5);
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.per_class_accuracy, vec![1.0, 1.0]);
        assert_eq!(r.mean_per_class_accuracy, 1.0);
    }

    #[test]
    fn hand_counted_two_class_case() {
        // Truth [0,0,1,1], predictions [0,0,0,1].
        let confusion = vec![vec![2, 0], vec![1, 1]];
        let r = tally_report(vec!["a".into(), "b".into()], confusion, StageTimings::default(), 4);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![1, 1]]);
        assert_eq!(r.overall_accuracy, 0.75);
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.5]);
        assert_eq!(r.mean_per_class_accuracy, 0.75);
    }

    #[test]
    fn classes_without_test_images_are_excluded_from_the_mean() {
        let confusion = vec![vec![2, 0, 0], vec![0, 0, 0], vec![0, 1, 1]];
        let r = tally_report(
            vec!["a".into(), "b".into(), "c".into()],
            confusion,
            StageTimings::default(),
            4,
        );
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.0, 0.5]);
        assert_eq!(r.mean_per_class_accuracy, 0.75);
        assert_eq!(r.overall_accuracy, 0.75);
    }

    // -- shared tiny world -------------------------------------------------

    struct TinyWorld {
        _dir: TempDir,
        manifest: DatasetManifest,
        bundle: ModelBundle,
    }

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::paper_profile(32, 16);
        cfg.pool_target = 3000;
        cfg.kmeans.max_iters = 20;
        cfg.svm.epochs = 40;
        cfg.mlp_hidden = vec![16];
        cfg.mlp.epochs = 150;
        cfg.seed = 11;
        cfg
    }

    fn tiny_world() -> &'static TinyWorld {
        static WORLD: OnceLock<TinyWorld> = OnceLock::new();
        WORLD.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            make_toy_corpus(dir.path(), 3, 5, 21).unwrap();
            let manifest = ingest_dataset(dir.path()).unwrap();
            let bundle = train_full(&manifest, &tiny_config()).unwrap();
            TinyWorld { _dir: dir, manifest, bundle }
        })
    }

    #[test]
    fn train_full_assembles_a_consistent_bundle() {
        let w = tiny_world();
        let b = &w.bundle;
        assert_eq!(b.class_names.len(), 5);
        assert_eq!(b.num_known, 3);
        assert_eq!(b.svm.num_classes(), 3);
        assert_eq!(b.svm.dim(), b.config.feature_len());
        assert_eq!(b.mlp1.input_dim(), 3);
        assert_eq!(b.mlp1.output_dim(), 3);
        let mlp2 = b.mlp2.as_ref().expect("toy corpus has unknown training data");
        assert_eq!(mlp2.output_dim(), 5);
        assert_eq!(b.openset.unknown_ids.iter().copied().collect::<Vec<_>>(), vec![3, 4]);
        // Tuned thresholds stay inside the grid range.
        assert!((0.0..=1.0).contains(&b.openset.t1));
        assert!((0.0..=1.0).contains(&b.openset.t2));
    }

    #[test]
    fn training_is_deterministic() {
        let w = tiny_world();
        let again = train_full(&w.manifest, &tiny_config()).unwrap();
        assert_eq!(again.to_bytes().unwrap(), w.bundle.to_bytes().unwrap());
    }

    #[test]
    fn evaluate_row_sums_match_test_counts() {
        let w = tiny_world();
        let report = evaluate(&w.bundle, &w.manifest).unwrap();
        // 5 classes (3 known + 2 unknown) with one test image each.
        assert_eq!(report.num_images, 5);
        for (row, class) in report.confusion.iter().zip(&w.manifest.classes) {
            assert_eq!(row.iter().sum::<usize>(), class.test.len());
        }
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, report.num_images);
        assert!((0.0..=1.0).contains(&report.overall_accuracy));
    }

    #[test]
    fn constant_image_scores_equal_biases() {
        let w = tiny_world();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("flat.pgm");
        crate::image::save_pgm(&GrayImage::constant(96, 96, 120).unwrap(), &path).unwrap();
        // CLAHE on a constant image keeps it constant, every patch is flat,
        // every descriptor is zero, the pooled feature is zero, so the SVM
        // scores collapse to the biases.
        let (result, _) = classify_one(&w.bundle, &path).unwrap();
        assert_eq!(result.scores, w.bundle.svm.biases);
        let (again, _) = classify_one(&w.bundle, &path).unwrap();
        assert_eq!(result, again);
    }

    #[test]
    fn missing_image_is_file_not_found() {
        let w = tiny_world();
        assert!(matches!(
            classify_one(&w.bundle, Path::new("/no/such/image.pgm")),
            Err(Error::FileNotFound(_))
        ));
    }

    #[test]
    fn known_only_corpus_downgrades_and_never_rejects() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_corpus(dir.path(), 3, 3, 5).unwrap();
        // Strip the unknown classes to force known-only mode.
        for name in [dataset::UNKNOWN_HEAVY, dataset::UNKNOWN_LIGHT] {
            std::fs::remove_dir_all(dir.path().join(name)).unwrap();
        }
        let manifest = ingest_dataset(dir.path()).unwrap();
        let mut cfg = tiny_config();
        cfg.pool_target = 2000;
        let bundle = train_full(&manifest, &cfg).unwrap();
        assert!(bundle.known_only());
        assert!(bundle.openset.unknown_ids.is_empty());
        assert_eq!(bundle.openset.t1, cfg.t1);

        let report = evaluate(&bundle, &manifest).unwrap();
        assert_eq!(report.class_names.len(), 3);
        // Every prediction lands on a known class by construction; the
        // confusion matrix is 3x3 so that is vacuously true, but routing
        // must also report the stage-1 stage for every image.
        let predictor = Predictor::new(&bundle).unwrap();
        for class in &manifest.classes {
            for path in &class.test {
                let (res, _) = predictor.classify_path(path).unwrap();
                assert_eq!(res.stage, crate::openset::DecisionStage::SvmArgmax);
            }
        }
    }

    #[test]
    fn evaluate_requires_test_images_and_known_labels() {
        let w = tiny_world();
        // Manifest stripped of test images.
        let mut empty = w.manifest.clone();
        for class in empty.classes.iter_mut() {
            class.test.clear();
        }
        assert!(matches!(evaluate(&w.bundle, &empty), Err(Error::EmptyTestSplit)));

        // Manifest with a class the bundle never saw.
        let mut renamed = w.manifest.clone();
        renamed.classes[0].name = "mystery".into();
        match evaluate(&w.bundle, &renamed) {
            Err(Error::UnknownTestLabel { label }) => assert_eq!(label, "mystery"),
            other => panic!("expected UnknownTestLabel, got {other:?}"),
        }
    }

    #[test]
    fn benchmark_rows_keep_order_and_duplicates_agree() {
        let w = tiny_world();
        let mut base = tiny_config();
        base.pool_target = 2000;
        base.kmeans.max_iters = 10;
        let sweep = [(16, Some(8)), (16, Some(8)), (16, None)];
        let report = benchmark_sweep(&w.manifest, &base, &sweep, 1).unwrap();
        assert_eq!(report.rows.len(), 3);
        for (row, &(m, mc)) in report.rows.iter().zip(&sweep) {
            assert_eq!((row.m, row.max_comparisons), (m, mc));
            assert_eq!(row.feature_len, 16 * 14);
        }
        // Duplicate sweep points: identical accuracy (timings vary).
        assert_eq!(report.rows[0].overall_accuracy, report.rows[1].overall_accuracy);
        assert!(!report.notes.is_empty());
        assert!(matches!(
            benchmark_sweep(&w.manifest, &base, &sweep[..1], 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn train_rejects_degenerate_manifests() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_corpus(dir.path(), 3, 2, 3).unwrap();
        let manifest = ingest_dataset(dir.path()).unwrap();

        let mut one_known = manifest.clone();
        one_known.classes.drain(1..3);
        assert!(matches!(
            train_full(&one_known, &tiny_config()),
            Err(Error::InvalidArgument(_))
        ));

        let mut no_train = manifest.clone();
        no_train.classes[1].train.clear();
        assert!(matches!(
            train_full(&no_train, &tiny_config()),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn report_text_and_csv_are_well_formed() {
        let confusion = vec![vec![2, 1], vec![0, 3]];
        let r = tally_report(vec!["ab".into(), "cd".into()], confusion, StageTimings::default(), 6);
        let text = r.to_text();
        assert!(text.contains("overall accuracy"));
        assert!(text.contains("ab"));
        let csv = r.confusion_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,ab,cd");
        assert_eq!(lines[1], "ab,2,1");
        assert_eq!(lines[2], "cd,0,3");
    }

    #[test]
    fn stub_bundle_errors_do_not_touch_pixels() {
        // evaluate must fail fast on an empty test split or a label gap
        // even with a bundle that could never run inference.
        let codebook = Codebook::from_flat(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let bundle = ModelBundle {
            config: PipelineConfig::paper_profile(2, 1),
            class_names: vec!["a".into(), "b".into()],
            num_known: 2,
            codebook,
            svm: LinearSvmModel {
                weights: vec![vec![0.0; 28], vec![0.0; 28]],
                biases: vec![0.0, 0.0],
                lambda: 1e-4,
            },
            mlp1: MlpModel::zeroed(&[2, 2]).unwrap(),
            mlp2: None,
            openset: OpenSetConfig { t1: 0.5, t2: 0.5, unknown_ids: BTreeSet::new() },
        };
        let manifest = DatasetManifest {
            root: PathBuf::from("/nonexistent"),
            classes: vec![dataset::ClassManifest {
                name: "a".into(),
                train: vec![],
                val: vec![],
                test: vec![],
            }],
            split_layout: true,
        };
        assert!(matches!(evaluate(&bundle, &manifest), Err(Error::EmptyTestSplit)));

        let mut with_ghost = manifest;
        with_ghost.classes[0].name = "ghost".into();
        with_ghost.classes[0].test.push(PathBuf::from("/nonexistent/ghost/img.pgm"));
        assert!(matches!(
            evaluate(&bundle, &with_ghost),
            Err(Error::UnknownTestLabel { .. })
        ));
    }
}
