use layoutgen::dataset::{generate_synthetic, SyntheticStyle};
use layoutgen::layout::Layout;
use layoutgen::metrics::{frechet_distance, jitter_positions, train_fid_extractor, FidExtractor, FidTrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn extractor_separates_real_from_jittered_layouts() {
    let corpus = generate_synthetic(2000, 0, &SyntheticStyle::default()).unwrap();
    let config = FidTrainConfig::default();
    let ex = train_fid_extractor(&corpus, &config).unwrap();

    let held_out: Vec<Layout> = corpus.val().into_iter().chain(corpus.test()).cloned().collect();
    let acc = ex.accuracy(&held_out, config.jitter_bins, 99).unwrap();
    assert!(acc > 0.8, "held-out accuracy {acc}");

    let real = ex.features(&held_out).unwrap();
    assert!(frechet_distance(&real, &real).unwrap().abs() < 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let jittered: Vec<Layout> = held_out
        .iter()
        .map(|l| jitter_positions(l, config.jitter_bins, 32, &mut rng).unwrap())
        .collect();
    let fake = ex.features(&jittered).unwrap();
    let (a, b) = real.split_at(real.len() / 2);
    let split_half = frechet_distance(a, b).unwrap();
    let vs_jitter = frechet_distance(&real, &fake).unwrap();
    assert!(vs_jitter > split_half, "jittered {vs_jitter} vs split-half {split_half}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fid.ckpt");
    ex.to_checkpoint().unwrap().save(&path).unwrap();
    let back = FidExtractor::from_checkpoint(layoutgen::model::CheckpointFile::load(&path).unwrap()).unwrap();
    assert_eq!(back.features(&held_out[..5]).unwrap(), ex.features(&held_out[..5]).unwrap());
}

#[test]
fn jitter_moves_every_position_within_bounds() {
    let corpus = generate_synthetic(50, 3, &SyntheticStyle::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for l in corpus.records() {
        let j = jitter_positions(l, 3, 32, &mut rng).unwrap();
        for (a, b) in l.elements.iter().zip(&j.elements) {
            let qa = a.quantized(32).unwrap();
            let qb = b.quantized(32).unwrap();
            assert_eq!(qa[2..], qb[2..], "sizes are untouched");
            for k in 0..2 {
                let d = qa[k] as i64 - qb[k] as i64;
                assert!(d.abs() <= 3);
                let pinned = qa[k] == 0 || qa[k] == 31;
                assert!(d != 0 || pinned, "an interior position must move");
            }
        }
    }
}
