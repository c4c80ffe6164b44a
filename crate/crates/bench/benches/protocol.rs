use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use d2_bench::{registered_network, scenario};
use d2_core::canonical::canonical_bytes;
use d2_core::crypto::{derive_pin_key, open_sealed, seal_to, verify, EncryptionKeyPair, KdfParams, SigningKeyPair};
use d2_core::harness::run_inproc;

fn crypto(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let recipient = EncryptionKeyPair::generate(&mut rng);
    let mut payload = vec![0u8; 1024];
    rng.fill_bytes(&mut payload);

    let mut g = c.benchmark_group("envelope");
    g.throughput(Throughput::Bytes(payload.len() as u64));
    g.bench_function("seal_1k", |b| b.iter(|| seal_to(&payload, &recipient.public(), &mut rng).unwrap()));
    let sealed = seal_to(&payload, &recipient.public(), &mut rng).unwrap();
    g.bench_function("open_1k", |b| b.iter(|| open_sealed(&sealed, &recipient).unwrap()));
    g.finish();

    let key = SigningKeyPair::from_seed([7; 32]);
    let claim = json!({
        "issuer": "https://gov.com",
        "predicate": {"kind": "age_over", "years": 18},
        "result": true,
        "nonce": "1_w0b1dvaWLN3olFK78Clw",
        "issued_at": "2026-01-01T00:00:00Z",
    });
    c.bench_function("canonical_bytes", |b| b.iter(|| canonical_bytes(&claim)));
    c.bench_function("sign", |b| b.iter(|| key.sign(&claim)));
    let sig = key.sign(&claim);
    c.bench_function("verify", |b| b.iter(|| verify(&key.public(), &claim, &sig).unwrap()));

    let mut g = c.benchmark_group("pin_kdf");
    g.sample_size(10);
    g.bench_function("argon2id_default", |b| {
        b.iter(|| derive_pin_key("4821", b"0123456789abcdef", KdfParams::default()))
    });
    g.finish();
}

fn hub(c: &mut Criterion) {
    let mut net = registered_network();
    let id = net.user("@alice_mail");
    let provider = net.providers["email"].clone();
    let hub = net.hubs["hub1"].address().clone();
    // One rotation plus one consuming discovery: the per-request cost of a
    // single-use temp.
    c.bench_function("rotate_and_consume", |b| {
        b.iter(|| {
            provider.rotate_temp(&id).unwrap();
            net.settle();
            let temp = provider.row(&id).unwrap().temp;
            net.replay_at_hub(&hub, &temp).unwrap();
            net.settle();
        })
    });
    net.shutdown();
}

fn scenarios(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario");
    g.sample_size(10);
    for name in ["register", "kyc_direct", "kyc_mediated", "migration"] {
        let s = scenario(name);
        g.bench_function(name, |b| {
            b.iter_batched(
                || s.clone(),
                |s| {
                    let r = run_inproc(&s).unwrap();
                    assert!(r.report.passed);
                    r.network.shutdown();
                },
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, crypto, hub, scenarios);
criterion_main!(benches);
