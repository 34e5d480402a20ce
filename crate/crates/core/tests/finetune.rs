use moqae_core::backbone::{train_toy_model, ReadoutConfig};
use moqae_core::corpus::synthetic_text;
use moqae_core::model::{CacheConfig, ToyConfig};
use moqae_core::router::RouterParams;
use moqae_core::trainer::{finetune, log_to_csv, split_corpus, FinetuneConfig, MemPenalty, LOG_HEADER};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn finetune_touches_only_the_router_and_is_reproducible() {
    let cfg = ToyConfig { layers: 2, heads: 2, head_dim: 8, ffn_dim: 32, max_seq: 128 };
    let text = synthetic_text(6000, 1);
    let readout = ReadoutConfig { epochs: 2, ..ReadoutConfig::default() };
    let model = train_toy_model(cfg, &text, 3, &readout).unwrap();
    let checksum = model.checksum();
    let (calib, held_out) = split_corpus(&text, 64, 0.2, 5).unwrap();
    assert_eq!(calib.sequences.len() + held_out.len(), 6000 / 64);

    let ft = FinetuneConfig {
        penalty: MemPenalty::MemoryProportional,
        cache: CacheConfig { chunk_size: 16, ..CacheConfig::default() },
        batch_size: 4,
        epochs: 2,
        seed: 7,
        ..FinetuneConfig::default()
    };
    let init = RouterParams::init(model.dim(), 3, &mut ChaCha8Rng::seed_from_u64(2));
    let a = finetune(&model, &calib, init.clone(), &ft).unwrap();
    let b = finetune(&model, &calib, init.clone(), &ft).unwrap();
    assert_eq!(model.checksum(), checksum);
    assert_ne!(a.params, init);
    assert_eq!(a.params, b.params);
    let csv = log_to_csv(&a.log);
    assert_eq!(csv, log_to_csv(&b.log));
    assert!(csv.starts_with(LOG_HEADER));
    assert_eq!(csv.lines().count(), a.log.len() + 1);
    assert!(a.log.iter().all(|s| s.l_total.is_finite() && s.avg_bits >= 2.0 && s.avg_bits <= 16.0));
}
