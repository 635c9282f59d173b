use super::*;
use crate::augment::{generate_synthetic_dataset, SyntheticSpec};
use crate::numerics::{Streams, Tensor};
use crate::train::TrainConfig;
use crate::vit::ModelParams;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn table(rows: &[Vec<f64>], labels: &[usize]) -> FeatureTable {
    let d = rows[0].len();
    FeatureTable {
        features: Tensor::new(vec![rows.len(), d], rows.concat()).unwrap(),
        labels: labels.to_vec(),
        ratio: 1.0,
        source_hash: None,
    }
}

fn gaussian_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = Streams::new(seed).stream("test", &[]);
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    let m = &mut c.model;
    m.encoder.image_size = 16;
    m.encoder.patch_size = 8;
    m.encoder.width = 16;
    m.encoder.depth = 1;
    m.encoder.heads = 2;
    m.decoder.width = 8;
    m.decoder.depth = 1;
    m.decoder.heads = 2;
    m.proj_dim = 8;
    c.mask_ratio = 0.5;
    c.batch_size = 4;
    c.epochs = 1;
    c.lr = Some(1e-3);
    c.scale.range_lo = 0.5;
    c.scale.range_hi = 0.8;
    c
}

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        images_per_class: 5,
        image_size: 16,
        ..SyntheticSpec::default()
    }
}

#[test]
fn k1_on_training_points_is_exact() {
    let rows = gaussian_rows(1, 30, 6);
    let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
    let t = table(&rows, &labels);
    assert_eq!(knn_classify(&t, &t, 1).unwrap(), 1.0);
}

#[test]
fn shuffled_labels_give_chance() {
    let train = gaussian_rows(2, 800, 16);
    let test = gaussian_rows(3, 800, 16);
    let mut rng = Streams::new(4).stream("labels", &[]);
    let lt: Vec<usize> = (0..800).map(|_| rng.random_range(0..4)).collect();
    let le: Vec<usize> = (0..800).map(|_| rng.random_range(0..4)).collect();
    let acc = knn_classify(&table(&train, &lt), &table(&test, &le), 5).unwrap();
    assert!((acc - 0.25).abs() < 0.05, "{acc}");
}

#[test]
fn hand_worked_vote() {
    // angles (deg): class 0 near 0, class 1 near 90, class 2 near 180
    let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
    let train: Vec<Vec<f64>> = [0.0, 10.0, 20.0, 80.0, 90.0, 100.0, 170.0, 190.0]
        .iter()
        .map(|&a| at(a))
        .collect();
    let lt = [0, 0, 0, 1, 1, 1, 2, 2];
    // 50 deg: nearest 20 (30), 80 (30), 10 (40) -> {0, 1, 0} -> class 0
    // 135 deg: nearest 100 (35), 170 (35), 90 (45) -> {1, 2, 1} -> class 1
    // 185 deg: nearest 190, 170, 100 -> {2, 2, 1} -> class 2
    let test: Vec<Vec<f64>> = [50.0, 135.0, 185.0].iter().map(|&a| at(a)).collect();
    let pred = knn_predict(&table(&train, &lt), &table(&test, &[0, 1, 2]), 3).unwrap();
    assert_eq!(pred, vec![0, 1, 2]);
}

#[test]
fn vote_ties_prefer_similarity_then_lower_class() {
    let train = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let q = vec![vec![1.0, 0.1]];
    let p = knn_predict(&table(&train, &[1, 0]), &table(&q, &[0]), 2).unwrap();
    assert_eq!(p, vec![1]);
    let q = vec![vec![1.0, 1.0]];
    let p = knn_predict(&table(&train, &[1, 0]), &table(&q, &[0]), 2).unwrap();
    assert_eq!(p, vec![0]);
}

#[test]
fn invalid_k_is_rejected() {
    let t = table(&gaussian_rows(5, 4, 3), &[0, 1, 0, 1]);
    assert!(knn_classify(&t, &t, 0).is_err());
    assert!(knn_classify(&t, &t, 5).is_err());
    assert!(knn_classify(&t, &t, 4).is_ok());
}

fn brute_force(train: &FeatureTable, test: &FeatureTable, k: usize) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let classes = train.labels.iter().chain(&test.labels).max().unwrap() + 1;
    (0..test.len())
        .map(|q| {
            let mut used = vec![false; train.len()];
            let mut count = vec![0usize; classes];
            let mut mass = vec![0.0f64; classes];
            for _ in 0..k {
                let mut best: Option<(usize, f64)> = None;
                for i in 0..train.len() {
                    let s = cos(test.row(q), train.row(i));
                    if !used[i] && best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
                let (i, s) = best.unwrap();
                used[i] = true;
                count[train.labels[i]] += 1;
                mass[train.labels[i]] += s;
            }
            let mut win = 0;
            for c in 1..classes {
                if count[c] > count[win] || (count[c] == count[win] && mass[c] > mass[win]) {
                    win = c;
                }
            }
            win
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn knn_matches_brute_force(seed in 0u64..10_000, m in 1usize..64, q in 1usize..12, d in 1usize..6, kk in 0usize..64) {
        let k = kk % m + 1;
        let train = gaussian_rows(seed, m, d);
        let test = gaussian_rows(seed + 1, q, d);
        let lt: Vec<usize> = (0..m).map(|i| (i * 7 + seed as usize) % 3).collect();
        let le = vec![0; q];
        let (a, b) = (table(&train, &lt), table(&test, &le));
        prop_assert_eq!(knn_predict(&a, &b, k).unwrap(), brute_force(&a, &b, k));
    }

    #[test]
    fn split_is_a_stratified_partition(seed in 0u64..1000, n in 4usize..60, f in 0.1f64..0.9) {
        let labels: Vec<usize> = (0..n).map(|i| (i * 5 + seed as usize) % 3).collect();
        let (a, b) = stratified_split(&labels, f, seed).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for c in 0..3 {
            let nc = labels.iter().filter(|&&l| l == c).count();
            let ac = a.iter().filter(|&&i| labels[i] == c).count();
            prop_assert_eq!(ac, (f * nc as f64).round() as usize);
        }
        prop_assert_eq!(stratified_split(&labels, f, seed).unwrap(), (a, b));
    }
}

#[test]
fn features_do_not_depend_on_batch_composition() {
    let ds = generate_synthetic_dataset(&SyntheticSpec {
        images_per_class: 12,
        image_size: 16,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let p = ModelParams::<f32>::init(&tiny().model_config(), &Streams::new(3)).unwrap();
    let all = extract_features(&p, &ds.images, &ds.labels, &ds.gsd, 0.5).unwrap();
    let idx = [7usize, 40, 3, 33];
    let sub = ds.subset(&idx);
    let part = extract_features(&p, &sub.images, &sub.labels, &sub.gsd, 0.5).unwrap();
    for (j, &i) in idx.iter().enumerate() {
        assert_eq!(part.row(j), all.row(i));
    }
    assert_eq!(all.dim(), 16);
}

#[test]
fn features_change_with_ratio() {
    let ds = generate_synthetic_dataset(&tiny_spec()).unwrap();
    let p = ModelParams::<f64>::init(&tiny().model_config(), &Streams::new(0)).unwrap();
    let a = extract_features(&p, &ds.images, &ds.labels, &ds.gsd, 1.0).unwrap();
    let b = extract_features(&p, &ds.images, &ds.labels, &ds.gsd, 0.25).unwrap();
    let diff: f64 = a
        .features
        .data()
        .iter()
        .zip(b.features.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-3);
    assert!(a.features.data().iter().all(|v| v.is_finite()));
}

#[test]
fn published_reference_lookup() {
    let mut c = TrainConfig::default();
    assert_eq!(published_reference(&c).unwrap().at(1.0), Some(79.3));
    c.losses.cross_pred = false;
    assert_eq!(published_reference(&c).unwrap().at(0.5), Some(72.4));
    c.losses.cross_consis = false;
    assert_eq!(published_reference(&c).unwrap().at(0.5), Some(68.3));
    c.losses.multi_scale = false;
    assert_eq!(published_reference(&c).unwrap().at(1.0), Some(58.9));
    let mut c = TrainConfig::default();
    c.losses.reconstruction = false;
    c.losses.negatives_encoder = false;
    c.losses.negatives_decoder = true;
    assert_eq!(published_reference(&c).unwrap().at(0.5), Some(57.1));
    assert_eq!(published_reference(&c).unwrap().at(0.25), None);
    c.gsd_positional = true;
    assert!(published_reference(&c).is_none());
}

fn grid_text(cells: &str) -> String {
    format!(
        "ratios = 0.5, 1.0\nseeds = 0\nk = 3\ntrain_fraction = 0.6\n\
         dataset.images_per_class = 5\ndataset.image_size = 16\n\
         base.image_size = 16\nbase.patch_size = 8\nbase.enc_width = 16\nbase.enc_depth = 1\n\
         base.enc_heads = 2\nbase.dec_width = 8\nbase.dec_depth = 1\nbase.dec_heads = 2\n\
         base.proj_dim = 8\nbase.mask_ratio = 0.5\nbase.batch_size = 4\nbase.epochs = 1\n\
         base.lr = 0.001\nbase.scale_lo = 0.5\n{cells}"
    )
}

#[test]
fn grid_parsing() {
    let g = AblationGrid::parse(
        &grid_text("[a]\n[b]\ncross_pred = off\n"),
        std::path::Path::new("."),
    )
    .unwrap();
    assert_eq!(g.cells.len(), 2);
    assert_eq!(g.ratios, vec![0.5, 1.0]);
    assert_eq!(
        g.cells[1].deltas,
        vec![("cross_pred".to_string(), "off".to_string())]
    );
    assert!(!g.cell_config(&g.cells[1], 9).unwrap().losses.cross_pred);
    assert_eq!(g.cell_config(&g.cells[1], 9).unwrap().seed, 9);
    let dir = std::path::Path::new(".");
    assert!(AblationGrid::parse(&grid_text(""), dir).is_err());
    assert!(AblationGrid::parse(&grid_text("[a]\nseed = 3\n"), dir).is_err());
    assert!(AblationGrid::parse(&grid_text("[a]\nbogus = 1\n"), dir).is_err());
    assert!(AblationGrid::parse(&grid_text("[random_init]\n"), dir).is_err());
    assert!(AblationGrid::parse("wat = 1\n[a]\n", dir).is_err());
    let g = AblationGrid::parse("data = tiles\n[a]\n", std::path::Path::new("/x")).unwrap();
    assert_eq!(g.data, DataSource::Tiles("/x/tiles".into()));
}

#[test]
fn empty_grid_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let g = AblationGrid::default();
    assert!(run_ablation(&g, Some(dir.path()), false, |_| {}).is_err());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn zero_delta_cells_agree_and_reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let g = AblationGrid::parse(
        &grid_text("random_init = on\n[a]\n[b]\n[c]\nreconstruction = off\n"),
        std::path::Path::new("."),
    )
    .unwrap();
    let rep = run_ablation(&g, Some(dir.path()), false, |_| {}).unwrap();
    assert_eq!(rep.rows.len(), 4 * 2);
    let acc = |cell: &str| -> Vec<f64> {
        rep.rows
            .iter()
            .filter(|r| r.cell == cell)
            .map(|r| r.accuracy)
            .collect()
    };
    assert_eq!(acc("a"), acc("b"));
    assert!(rep.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with(REPORT_HEADER));
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.contains("random_init,0,0.5,-,-,-,-,-,-,-,3,"));
    assert!(csv.contains("c,0,1,1,1,1,1,0,0,0,3,"));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.contains("a,1,") && summary.contains(",79.3,negative samples"));
    assert!(dir.path().join("cells/a_seed0.ckpt").exists());
    assert!(dir.path().join("cells/a_seed0.csv").exists());
    assert!(rep.summary_table().contains("published"));

    let again = run_ablation(&g, Some(dir.path()), true, |_| {}).unwrap();
    assert_eq!(again, rep);
}
