//! Toy training of the alignment module on shifted copies: the predicted
//! offsets should grow with the true displacement.

use dksan::alignment::DkcAlign;
use dksan::autodiff::{Graph, ParamStore};
use dksan::loss_metrics::charbonnier;
use dksan::training::{adam_step, AdamState};
use dksan::{Rng, Tensor};

const SIZE: usize = 12;
const CH: usize = 8;

/// Random smooth multi-channel field sampled on a grid moved by `(dy, dx)`.
struct Field {
    waves: Vec<[f64; 4]>,
}

impl Field {
    fn random(rng: &mut Rng) -> Self {
        let waves = (0..3 * CH)
            .map(|_| {
                [
                    rng.uniform_in(-0.6, 0.6),
                    rng.uniform_in(-0.6, 0.6),
                    rng.uniform_in(0.0, std::f64::consts::TAU),
                    rng.uniform_in(0.2, 0.5),
                ]
            })
            .collect();
        Self { waves }
    }

    fn render(&self, dy: f64, dx: f64) -> Tensor<f32> {
        Tensor::from_fn([1, CH, SIZE, SIZE], |_, c, y, x| {
            let (y, x) = (y as f64 + dy, x as f64 + dx);
            let v: f64 = self.waves[3 * c..3 * c + 3]
                .iter()
                .map(|&[fy, fx, ph, a]| a * (fy * y + fx * x + ph).sin())
                .sum();
            v as f32
        })
    }
}

fn sample(rng: &mut Rng) -> (Tensor<f32>, Tensor<f32>, f64) {
    let field = Field::random(rng);
    let dy = rng.below(5) as f64 - 2.0;
    let dx = rng.below(5) as f64 - 2.0;
    (field.render(dy, dx), field.render(0.0, 0.0), (dy * dy + dx * dx).sqrt())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn offsets_track_shift_magnitude() {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::<f32>::new();
    let align = DkcAlign::new(&mut store, "align", CH, 2, 5, &mut rng).unwrap();
    let mut adam = AdamState::new(&store, 0.9, 0.999, 1e-8);
    for _ in 0..1000 {
        let (f_n, f_r): (Vec<_>, Vec<_>) = (0..4).map(|_| sample(&mut rng)).map(|(n, r, _)| (n, r)).unzip();
        let mut g = Graph::new();
        let n = g.constant(Tensor::concat_batch(&f_n.iter().collect::<Vec<_>>()).unwrap());
        let r = g.constant(Tensor::concat_batch(&f_r.iter().collect::<Vec<_>>()).unwrap());
        let out = align.forward(&mut g, &store, n, r).unwrap();
        let loss = charbonnier(&mut g, out, r, 1e-3).unwrap();
        store.zero_grad();
        g.backward_into(loss, &mut store).unwrap();
        adam_step(&mut store, &mut adam, 2e-3).unwrap();
    }

    let mut shifts = Vec::new();
    let mut mean_abs = Vec::new();
    for _ in 0..40 {
        let (f_n, f_r, s) = sample(&mut rng);
        let mut g = Graph::new();
        let n = g.constant(f_n);
        let r = g.constant(f_r);
        let (_, offsets, _) = align.forward_with_fields(&mut g, &store, n, r).unwrap();
        let o = g.value(offsets);
        shifts.push(s);
        mean_abs.push(o.as_slice().iter().map(|v| v.abs() as f64).sum::<f64>() / o.len() as f64);
    }
    let r = pearson(&shifts, &mean_abs);
    println!("correlation between |shift| and mean |offset|: {r:.3}");
    assert!(r > 0.0, "correlation {r}");
}
