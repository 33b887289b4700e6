//! Scratch diagnostic: split reconstruction error into boundary and interior
//! pixel populations for a trained checkpoint.

use lil::generator::{Generator, NoiseBundle, StylePoint};
use lil::nn::{cosine_lr, Adam, AdamParams};
use lil::procgen::{render, scene_from_latent, RES};
use lil::rng;
use ndarray::{Array2, Array3};

/// Fit a free per-scene style point to one target map.
fn project_point(
    gen: &Generator,
    noise: &NoiseBundle,
    start: &StylePoint,
    target: &Array3<f32>,
) -> StylePoint {
    let (l, dw) = (gen.arch.n_layers(), gen.arch.dw);
    let mut point = StylePoint {
        rows: start.rows.clone(),
    };
    let steps = 400;
    let mut adam = Adam::new(
        AdamParams {
            lr: 0.01,
            ..AdamParams::default()
        },
        &[l * dw],
    );
    let npx = (RES * RES * 3) as f32;
    for step in 0..steps {
        let (img, cache) = gen.synthesize_cached(&point, noise).unwrap();
        let mut d_img = Array3::<f32>::zeros(img.raw_dim());
        ndarray::Zip::from(&mut d_img)
            .and(&img)
            .and(target)
            .for_each(|d, &a, &t| *d = (a - t).signum() / npx);
        let grad = gen.backward_synthesis(&cache, &d_img, noise, None);
        let lr = cosine_lr(0.01, step, steps, 0.05);
        adam.step_with_lr(
            lr,
            &mut [point.rows.as_slice_mut().unwrap()],
            &[grad.as_slice().unwrap()],
        );
    }
    point
}

fn point_l1(gen: &Generator, noise: &NoiseBundle, point: &StylePoint, target: &Array3<f32>) -> f32 {
    let img = gen.synthesize(point, noise).unwrap();
    let mut loss = 0.0f32;
    ndarray::Zip::from(&img).and(target).for_each(|&a, &t| {
        loss += (a - t).abs();
    });
    loss / (RES * RES * 3) as f32
}

const SEED_A8: u64 = 424_242;

fn main() {
    let path = std::env::args().nth(1).expect("usage: diag <ckpt> [project]");
    let mode = std::env::args().nth(2).unwrap_or_default();
    let (gen, _meta) = Generator::load_checkpoint(path.as_ref()).unwrap();
    let noise = NoiseBundle::from_seed(99, &gen.arch);

    if mode == "a8" {
        let alb_path = std::env::args().nth(3).expect("a8 <ckpt> <albedo.json> <shading.json>");
        let sha_path = std::env::args().nth(4).expect("a8 <ckpt> <albedo.json> <shading.json>");
        let albedo = lil::search::load_offset(alb_path.as_ref()).unwrap().offset;
        let shading = lil::search::load_offset(sha_path.as_ref()).unwrap().offset;
        let latents = rng::latent_pool(SEED_A8, "a8/latents", 50, gen.arch.dz);
        let mut images = Vec::new();
        let mut albedos = Vec::new();
        let mut shadings = Vec::new();
        for z in &latents {
            let w = gen.map_latent(z.view()).unwrap();
            let base = gen.broadcast(w.view());
            images.push(gen.synthesize(&base, &noise).unwrap());
            albedos.push(
                gen.synthesize(&gen.apply_offset(&base, &albedo).unwrap(), &noise)
                    .unwrap(),
            );
            let s_img = gen
                .synthesize(&gen.apply_offset(&base, &shading).unwrap(), &noise)
                .unwrap();
            shadings.push(lil::codec::decode_shading(s_img.view()).unwrap());
        }
        let n = latents.len();
        let mut matched = 0.0;
        let mut shuffled = 0.0;
        for i in 0..n {
            matched += lil::eval::eval_albedo_shading(
                images[i].view(),
                albedos[i].view(),
                shadings[i].view(),
            )
            .unwrap()
            .0;
            shuffled += lil::eval::eval_albedo_shading(
                images[i].view(),
                albedos[i].view(),
                shadings[(i + 1) % n].view(),
            )
            .unwrap()
            .0;
        }
        println!("matched  {:.5}", matched / n as f64);
        println!("shuffled {:.5}", shuffled / n as f64);
        println!("ratio    {:.3}", shuffled / matched);
        return;
    }

    if mode == "align" {
        let n = 8;
        let latents = rng::latent_pool(424_242, "diag/scenes", n, gen.arch.dz);
        let mut starts = Vec::new();
        let mut targets = Vec::new();
        let mut deltas: Vec<Array2<f32>> = Vec::new();
        for z in &latents {
            let spec = scene_from_latent(z.view()).unwrap();
            let bundle = render(&spec);
            let w = gen.map_latent(z.view()).unwrap();
            let start = gen.broadcast(w.view());
            let fitted = project_point(&gen, &noise, &start, &bundle.albedo);
            deltas.push(&fitted.rows - &start.rows);
            starts.push(start);
            targets.push(bundle.albedo);
        }
        let mut mean = Array2::<f32>::zeros(deltas[0].raw_dim());
        for d in &deltas {
            mean += d;
        }
        mean /= n as f32;
        let m_sq = mean.mapv(|v| v * v).sum();
        let tot_sq: f32 = deltas.iter().map(|d| d.mapv(|v| v * v).sum()).sum();
        let mut cos_sum = 0.0f32;
        let mut pairs = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dot = (&deltas[i] * &deltas[j]).sum();
                let ni = deltas[i].mapv(|v| v * v).sum().sqrt();
                let nj = deltas[j].mapv(|v| v * v).sum().sqrt();
                cos_sum += dot / (ni * nj);
                pairs += 1;
            }
        }
        let mut shared = 0.0f32;
        let npx = (RES * RES * 3) as f32;
        for (start, target) in starts.iter().zip(&targets) {
            let point = StylePoint {
                rows: &start.rows + &mean,
            };
            let img = gen.synthesize(&point, &noise).unwrap();
            let mut loss = 0.0f32;
            ndarray::Zip::from(&img).and(target).for_each(|&a, &t| {
                loss += (a - t).abs();
            });
            shared += loss / npx;
        }
        println!("mean |delta|          {:.2}", (tot_sq / n as f32).sqrt());
        println!("|mean dir|            {:.2}", m_sq.sqrt());
        println!("energy explained      {:.4}", m_sq * n as f32 / tot_sq);
        println!("mean pairwise cos     {:.4}", cos_sum / pairs as f32);
        println!("shared-mean albedo L1 {:.5}", shared / n as f32);
        return;
    }

    if mode == "project" {
        let latents = rng::latent_pool(424_242, "diag/scenes", 8, gen.arch.dz);
        let mut alb = 0.0f32;
        let mut img_l = 0.0f32;
        for z in &latents {
            let spec = scene_from_latent(z.view()).unwrap();
            let bundle = render(&spec);
            let w = gen.map_latent(z.view()).unwrap();
            let start = gen.broadcast(w.view());
            let pa = point_l1(
                &gen,
                &noise,
                &project_point(&gen, &noise, &start, &bundle.albedo),
                &bundle.albedo,
            );
            let pi = point_l1(
                &gen,
                &noise,
                &project_point(&gen, &noise, &start, &bundle.image),
                &bundle.image,
            );
            println!("scene: albedo proj {:.5}  image proj {:.5}", pa, pi);
            alb += pa;
            img_l += pi;
        }
        let n = latents.len() as f32;
        println!("mean: albedo proj {:.5}  image proj {:.5}", alb / n, img_l / n);
        return;
    }

    let latents = rng::latent_pool(424_242, "diag/scenes", 20, gen.arch.dz);

    let mut b_mass = 0.0f64;
    let mut i_mass = 0.0f64;
    let mut ab_mass = 0.0f64;
    let mut ai_mass = 0.0f64;
    let mut b_px = 0usize;
    let mut i_px = 0usize;

    for z in &latents {
        let spec = scene_from_latent(z.view()).unwrap();
        let bundle = render(&spec);
        let w = gen.map_latent(z.view()).unwrap();
        let img = gen.synthesize(&gen.broadcast(w.view()), &noise).unwrap();

        // Class index per pixel from the one-hot masks.
        let mut cls = Array2::<usize>::zeros((RES, RES));
        for y in 0..RES {
            for x in 0..RES {
                let mut best = 0;
                for c in 1..3 {
                    if bundle.masks[[y, x, c]] > bundle.masks[[y, x, best]] {
                        best = c;
                    }
                }
                cls[[y, x]] = best;
            }
        }

        for y in 0..RES {
            for x in 0..RES {
                let mut boundary = false;
                for (dy, dx) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && ny < RES as i64 && nx >= 0 && nx < RES as i64 {
                        if cls[[ny as usize, nx as usize]] != cls[[y, x]] {
                            boundary = true;
                        }
                    }
                }
                let mut e = 0.0f64;
                let mut ea = 0.0f64;
                for c in 0..3 {
                    e += (img[[y, x, c]] - bundle.image[[y, x, c]]).abs() as f64;
                    ea += (img[[y, x, c]] - bundle.albedo[[y, x, c]]).abs() as f64;
                }
                if boundary {
                    b_mass += e / 3.0;
                    ab_mass += ea / 3.0;
                    b_px += 1;
                } else {
                    i_mass += e / 3.0;
                    ai_mass += ea / 3.0;
                    i_px += 1;
                }
            }
        }
    }

    let n = (b_px + i_px) as f64;
    println!("recon L1 overall      {:.5}", (b_mass + i_mass) / n);
    println!("boundary px fraction  {:.4}", b_px as f64 / n);
    println!("recon boundary mean   {:.5}", b_mass / b_px as f64);
    println!("recon interior mean   {:.5}", i_mass / i_px as f64);
    println!(
        "recon boundary share  {:.4}",
        b_mass / (b_mass + i_mass)
    );
    println!("img-vs-albedo overall {:.5}", (ab_mass + ai_mass) / n);
    println!("  boundary mean       {:.5}", ab_mass / b_px as f64);
    println!("  interior mean       {:.5}", ai_mass / i_px as f64);
}
