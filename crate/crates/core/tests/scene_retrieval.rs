use unireid::lse::{generate_scene, Modality, SceneSpec};

fn pixels(identity: u32, clip: u32, seed: u64) -> Vec<f32> {
    let s = SceneSpec { identity, seed, clip, height: 32, width: 16, frames: 1 };
    generate_scene(&s, Modality::Image).frames.remove(0).pixels
}

fn rank1(identities: u32, seed: u64) -> f64 {
    let gallery: Vec<_> = (0..identities).map(|i| pixels(i, 0, seed)).collect();
    let mut hits = 0;
    let mut total = 0;
    for id in 0..identities {
        for clip in 1..4 {
            let q = pixels(id, clip, seed);
            let best = gallery
                .iter()
                .enumerate()
                .map(|(g, p)| (g, p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f32>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            hits += (best == id as usize) as usize;
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn pixel_nearest_neighbour_separates_identities() {
    for seed in [0, 1, 2] {
        let r = rank1(16, seed);
        eprintln!("seed {seed}: pixel-NN rank-1 {r:.3}");
        assert!(r >= 0.9, "seed {seed}: {r}");
    }
}
