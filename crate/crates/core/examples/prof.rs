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
        sizes: SplitSizes { train: 16, dev: 4, test: 4 },
        ..CorpusSpec::default()
    };
    let corpus = Corpus::materialize(&spec).unwrap();
    let cfg = ModelConfig::desk_default(FusionStrategy::ModalityAttention);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let opts = ForwardOptions::default();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    for _ in 0..2 {
        for u in corpus.split(Split::Train) {
            let mut g = Graph::new();
            let mut m = BoundModel::new(&mut g, &cfg, &params, true).unwrap();
            let (loss, _) = forward_teacher_forced(&mut g, &mut m, u, &opts, &mut rng).unwrap();
            g.backward(loss).unwrap();
            let _ = m.gradients(&g);
        }
    }
}
