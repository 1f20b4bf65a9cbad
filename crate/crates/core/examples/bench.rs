use std::time::Instant;

use avfuse::autodiff::Graph;
use avfuse::corpus::{Corpus, CorpusSpec, Snr, SnrSpec, SplitSizes, Split};
use avfuse::model::{
    forward_teacher_forced, BoundModel, ForwardOptions, FusionStrategy, ModelConfig, ModelParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let spec = CorpusSpec {
        audio_snr: SnrSpec::Fixed(Snr::Db(0.0)),
        sizes: SplitSizes { train: 64, dev: 4, test: 4 },
        ..CorpusSpec::default()
    };
    let corpus = Corpus::materialize(&spec).unwrap();
    let cfg = ModelConfig::desk_default(FusionStrategy::ModalityAttention);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let utts = corpus.split(Split::Train);
    let opts = ForwardOptions::default();
    let mut rng = ChaCha12Rng::seed_from_u64(0);

    // Forward only, non-trainable.
    let t0 = Instant::now();
    let mut nodes = 0;
    for _ in 0..4 {
        for u in utts {
            let mut g = Graph::new();
            let mut m = BoundModel::new(&mut g, &cfg, &params, false).unwrap();
            let _ = forward_teacher_forced(&mut g, &mut m, u, &opts, &mut rng).unwrap();
            nodes = g.len();
        }
    }
    println!("forward only (no grads):  {:.2} ms/utt, {} nodes", t0.elapsed().as_secs_f64() * 1000.0 / 256.0, nodes);

    // Forward trainable (graph marked, no backward).
    let t0 = Instant::now();
    for _ in 0..4 {
        for u in utts {
            let mut g = Graph::new();
            let mut m = BoundModel::new(&mut g, &cfg, &params, true).unwrap();
            let _ = forward_teacher_forced(&mut g, &mut m, u, &opts, &mut rng).unwrap();
        }
    }
    println!("forward trainable:        {:.2} ms/utt", t0.elapsed().as_secs_f64() * 1000.0 / 256.0);

    // Forward + backward + gradient harvest.
    let t0 = Instant::now();
    for _ in 0..4 {
        for u in utts {
            let mut g = Graph::new();
            let mut m = BoundModel::new(&mut g, &cfg, &params, true).unwrap();
            let (loss, _) = forward_teacher_forced(&mut g, &mut m, u, &opts, &mut rng).unwrap();
            g.backward(loss).unwrap();
            let _ = m.gradients(&g);
        }
    }
    println!("forward+backward+harvest: {:.2} ms/utt", t0.elapsed().as_secs_f64() * 1000.0 / 256.0);

    // Bind cost alone.
    let t0 = Instant::now();
    for _ in 0..1024 {
        let mut g = Graph::new();
        let _ = BoundModel::new(&mut g, &cfg, &params, true).unwrap();
    }
    println!("bind alone:               {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / 1024.0);
}
