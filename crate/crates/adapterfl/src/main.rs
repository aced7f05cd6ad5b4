// temporary: does BN probe mode change the similarity landscape?
use adapterfl::nn::Mode;
use adapterfl::tensor::Tensor;
use adapterfl::zoo::{build, ArchId};
use adapterfl::cka::{cka_from_grams, CenteredGram};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grams_with_mode(arch: ArchId, probe: &Tensor<f32>, mode: Mode, seed: u64) -> Vec<CenteredGram> {
    let mut m = build(arch, 10, (3, 32, 32), seed).unwrap();
    let cuts = m.cut_candidates.clone();
    let mut grams = Vec::new();
    let mut h = probe.clone();
    for (i, l) in m.graph.layers.iter_mut().enumerate() {
        let (y, _) = l.forward(h, mode).unwrap();
        h = y;
        if cuts.contains(&(i + 1)) {
            let n = h.shape()[0];
            grams.push(CenteredGram::from_rows_f32(h.data(), n, h.numel() / n));
        }
    }
    grams
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..128 * 3 * 32 * 32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let probe = Tensor::from_vec(&[128, 3, 32, 32], data).unwrap();
    for mode in [Mode::Eval, Mode::Train] {
        let cnn = grams_with_mode(ArchId::CnnS, &probe, mode, 0);
        let rn = grams_with_mode(ArchId::ResNet18, &probe, mode, 2);
        println!("mode {:?}: cnn cuts x resnet cuts cka matrix", mode);
        for (i, gc) in cnn.iter().enumerate() {
            let row: Vec<String> = rn
                .iter()
                .map(|gr| format!("{:.3}", cka_from_grams(gc, gr).value))
                .collect();
            println!("  cnn[{i}]: {}", row.join(" "));
        }
    }
}
