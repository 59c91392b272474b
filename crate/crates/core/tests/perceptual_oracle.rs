use sarreg::imagecore::Image;
use sarreg::perceptual::{extract_features, vgg_distance, ExtractorConfig, FeatureExtractor};

/// Plain nested-loop feature pass in f64: conv 3×3 pad 1, ReLU, per-map
/// min-max, 2×2 max pool at block ends.
fn loop_features(ex: &FeatureExtractor, img: &Image) -> Vec<Vec<Vec<f64>>> {
    let pools = [false, true, false, true, false, true, false, false, true, false, false, false];
    let (mut h, mut w) = img.shape();
    let mut maps: Vec<Vec<f64>> = vec![img.pixels().iter().map(|&v| v as f64).collect()];
    let mut out = Vec::new();
    for (layer, &pool) in ex.layers().iter().zip(&pools) {
        let [co, ci, _, _] = layer.weight.dims4();
        let wt = layer.weight.data();
        let mut next = Vec::with_capacity(co);
        for o in 0..co {
            let mut m = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = layer.bias.data()[o] as f64;
                    for (i, src) in maps.iter().enumerate().take(ci) {
                        for kr in 0..3 {
                            for kc in 0..3 {
                                let (rr, cc) = (r as i64 + kr as i64 - 1, c as i64 + kc as i64 - 1);
                                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                                    continue;
                                }
                                acc += wt[((o * ci + i) * 3 + kr) * 3 + kc] as f64 * src[rr as usize * w + cc as usize];
                            }
                        }
                    }
                    m[r * w + c] = acc.max(0.0);
                }
            }
            next.push(m);
        }
        let normalized = next
            .iter()
            .map(|m| {
                let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m.iter()
                    .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                    .collect()
            })
            .collect();
        out.push(normalized);
        if pool {
            let (ho, wo) = (h / 2, w / 2);
            next = next
                .iter()
                .map(|m| {
                    let mut p = vec![0.0; ho * wo];
                    for r in 0..ho {
                        for c in 0..wo {
                            p[r * wo + c] = m[2 * r * w + 2 * c]
                                .max(m[2 * r * w + 2 * c + 1])
                                .max(m[(2 * r + 1) * w + 2 * c])
                                .max(m[(2 * r + 1) * w + 2 * c + 1]);
                        }
                    }
                    p
                })
                .collect();
            h = ho;
            w = wo;
        }
        maps = next;
    }
    out
}

fn loop_distance(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (la, lb) in a.iter().zip(b) {
        for (ma, mb) in la.iter().zip(lb) {
            total += ma.iter().zip(mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ma.len() as f64;
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn distance_matches_loop_oracle() {
    let ex = FeatureExtractor::seeded(ExtractorConfig::desk_scale(21));
    let a = Image::from_fn(16, 16, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0).unwrap();
    let b = Image::from_fn(16, 16, |r, c| 0.5 + 0.4 * ((r as f32 * 0.5).sin() * (c as f32 * 0.3).cos())).unwrap();
    let fa = extract_features(&a, &ex).unwrap();
    let fb = extract_features(&b, &ex).unwrap();
    let got = vgg_distance(&fa, &fb).unwrap();
    let want = loop_distance(&loop_features(&ex, &a), &loop_features(&ex, &b));
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn full_scale_stack_has_3968_maps() {
    let ex = FeatureExtractor::seeded(ExtractorConfig::full_scale(1));
    let img = Image::from_fn(16, 16, |r, c| ((r + c) % 5) as f32 / 4.0).unwrap();
    let f = extract_features(&img, &ex).unwrap();
    assert_eq!(f.map_count(), 3968);
    let total: usize = f.layers().iter().map(|t| t.shape()[0]).sum();
    assert_eq!(total, 3968);
}
