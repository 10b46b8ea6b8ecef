//! One line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{small_cnn, small_oracle};
use skyseg_core::backends::{AttentionStack, CnnConfig, SegPrediction, StageAttention, STAGE_SIZES};
use skyseg_core::fusion::{probability_fusion, FusionMode};
use skyseg_core::metrics::{miou, volume_refinement, volume_stats};
use skyseg_core::numerics::{Grid, Tensor};
use skyseg_core::protocol::{decode, encode, CorruptionPhase, Message, Payload, TtaMode, HEADER_LEN};
use skyseg_core::scenario::{run_scenario, CnnSpec, LeaderBackend, Mission};
use skyseg_core::selection::{final_attention, select_patches, SelectionMethod, SelectionWeights};
use skyseg_core::tta::{ema_update, NormStats};
use skyseg_core::world::{CorruptionKind, GeoRect};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn wire_volume() -> Check {
    let refinement = |h: usize, w: usize| Message {
        sender: 1,
        recipient: 0,
        round: 0,
        payload: Payload::Refinement { patch_index: 0, labels: vec![1; h * w], probs: vec![0.5; h * w] },
    };
    for (h, w, expect) in [(600, 400, 1_440_000usize), (400, 300, 720_000)] {
        let frame = encode(&refinement(h, w)).map_err(|e| e.to_string())?;
        ensure(frame.len() - HEADER_LEN == expect, || format!("refinement {h}x{w}: {}", frame.len() - HEADER_LEN))?;
        ensure(volume_refinement(h, w) == expect as u64, || "metrics refinement volume".into())?;
    }

    let layout = CnnConfig::new(6).layer_channels;
    let stats = layout.iter().map(|&c| NormStats::standard(c)).collect();
    let share = Message { sender: 1, recipient: 2, round: 0, payload: Payload::StatShare { stats } };
    let values = share.payload_len() - 4 * layout.len();
    ensure(values == 71_488, || format!("stat values {values}"))?;
    ensure(volume_stats(17_872) == 71_488, || "metrics stat volume".into())?;
    ensure(encode(&share).map_err(|e| e.to_string())?.len() == HEADER_LEN + 71_488 + 240, || "stat frame".into())?;

    let mut cfg = small_oracle(1, 3);
    cfg.tta = TtaMode::Cross;
    cfg.follower.cnn = CnnSpec::default();
    let report = run_scenario(cfg).map_err(|e| e.to_string())?;
    let per_follower: Vec<u64> = report.rounds[0].follower_paths.iter().map(|p| p.stat_value_bytes).collect();
    ensure(per_follower == vec![142_976; 3], || format!("L-3F stat traffic {per_follower:?}"))?;
    Ok("1,440,000 / 720,000 / 71,488 / 142,976 bytes".into())
}

fn tta_oracle() -> Check {
    let mut worst = 0.0f64;
    for n in 1..=3usize {
        let mut cfg = small_cnn(20 + n as u64, n, TtaMode::Cross);
        cfg.rounds = 100;
        cfg.scene.dynamic = true;
        cfg.follower.cnn = CnnSpec { layers: 12, channels: 600, fan_in: 4, stride: 8 };
        cfg.schedule = vec![
            CorruptionPhase { from_round: 0, kind: CorruptionKind::None, severity: 0 },
            CorruptionPhase { from_round: 50, kind: CorruptionKind::Snow, severity: 4 },
        ];
        let alpha = cfg.alpha;
        let mut mission = Mission::build(cfg).map_err(|e| e.to_string())?;
        // scalar replay state: [follower][layer][channel] -> (mean, var)
        let mut replay: Vec<Vec<Vec<(f64, f64)>>> = mission
            .followers()
            .iter()
            .map(|f| f.bank().running().iter().map(|s| s.mean.iter().copied().zip(s.var.iter().copied()).collect()).collect())
            .collect();
        let mut failure = None;
        mission
            .run(|out| {
                let q = |x: f64| if n > 1 { f16::from_f64(x).to_f64() } else { x };
                for (fi, t) in out.tta.iter().enumerate() {
                    for (l, layer) in replay[fi].iter_mut().enumerate() {
                        for (c, (m, v)) in layer.iter_mut().enumerate() {
                            let mut agg_m = 0.0;
                            let mut agg_v = 0.0;
                            for peer in &out.tta {
                                agg_m += q(peer.local[l].mean[c]);
                                agg_v += q(peer.local[l].var[c]);
                            }
                            agg_m /= out.tta.len() as f64;
                            agg_v /= out.tta.len() as f64;
                            *m = (1.0 - alpha) * *m + alpha * agg_m;
                            *v = (1.0 - alpha) * *v + alpha * agg_v;
                            let d = (t.adapted[l].mean[c] - *m).abs().max((t.adapted[l].var[c] - *v).abs());
                            worst = worst.max(d);
                            if d > 1e-6 && failure.is_none() {
                                failure = Some(format!("n={n} round {} layer {l} ch {c}: diff {d:e}", out.report.round));
                            }
                        }
                    }
                }
                if out.tta.len() != n && failure.is_none() {
                    failure = Some(format!("n={n}: {} followers adapted", out.tta.len()));
                }
            })
            .map_err(|e| e.to_string())?;
        if let Some(f) = failure {
            return Err(f);
        }
    }
    Ok(format!("1-3 followers x 100 rounds, max diff {worst:.1e}"))
}

fn ema_convexity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seq in 0..10_000 {
        let c = rng.gen_range(1..6);
        let draw = |rng: &mut ChaCha8Rng| {
            let mean = (0..c).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let var = (0..c).map(|_| rng.gen_range(0.0..100.0) * rng.gen::<f64>()).collect();
            NormStats::new(mean, var).unwrap()
        };
        let mut prev = draw(&mut rng);
        for _ in 0..rng.gen_range(1..30) {
            let inc = draw(&mut rng);
            let alpha = rng.gen::<f64>();
            let next = ema_update(&prev, &inc, alpha).map_err(|e| e.to_string())?;
            for ch in 0..c {
                let within = |x: f64, a: f64, b: f64| x >= a.min(b) && x <= a.max(b);
                ensure(within(next.mean[ch], prev.mean[ch], inc.mean[ch]), || format!("sequence {seq}: mean escaped"))?;
                ensure(within(next.var[ch], prev.var[ch], inc.var[ch]), || format!("sequence {seq}: var escaped"))?;
                ensure(next.var[ch] >= 0.0, || format!("sequence {seq}: negative var"))?;
            }
            prev = next;
        }
    }
    Ok("10^4 random sequences".into())
}

fn random_stack(rng: &mut ChaCha8Rng, quadrant: Option<usize>) -> AttentionStack {
    let stages = STAGE_SIZES
        .iter()
        .map(|&size| {
            let block = |rng: &mut ChaCha8Rng| {
                let data = (0..size * size)
                    .map(|i| {
                        let (r, c) = (i / size, i % size);
                        let q = (r >= size / 2) as usize * 2 + (c >= size / 2) as usize;
                        match quadrant {
                            Some(want) if want != q => 0.0,
                            _ => rng.gen_range(0.0..3.0f32),
                        }
                    })
                    .collect();
                Tensor::new(vec![size, size], data).unwrap()
            };
            let blocks = [block(rng), block(rng)];
            StageAttention { size, blocks }
        })
        .collect();
    AttentionStack::new(stages).unwrap()
}

fn combine(a: &AttentionStack, b: &AttentionStack, x: f32, y: f32) -> AttentionStack {
    let stages = a
        .stages()
        .iter()
        .zip(b.stages())
        .map(|(sa, sb)| {
            let mix = |ta: &Tensor, tb: &Tensor| {
                Tensor::new(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(p, q)| x * p + y * q).collect())
                    .unwrap()
            };
            StageAttention { size: sa.size, blocks: [mix(&sa.blocks[0], &sb.blocks[0]), mix(&sa.blocks[1], &sb.blocks[1])] }
        })
        .collect();
    AttentionStack::new(stages).unwrap()
}

fn selection_linearity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = SelectionWeights::default();
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let (a, b) = (random_stack(&mut rng, None), random_stack(&mut rng, None));
        let (x, y) = (rng.gen_range(0.0..2.0f32), rng.gen_range(0.0..2.0f32));
        let lhs = final_attention(&combine(&a, &b, x, y), &w).map_err(|e| e.to_string())?;
        let fa = final_attention(&a, &w).unwrap();
        let fb = final_attention(&b, &w).unwrap();
        for i in 0..4 {
            let d = (lhs.data()[i] - (x * fa.data()[i] + y * fb.data()[i])).abs();
            worst = worst.max(d);
        }
    }
    ensure(worst <= 1e-5, || format!("linearity error {worst:e}"))?;
    let rect = GeoRect::full(1200, 800);
    let mut hits = 0;
    for t in 0..100 {
        let q = t % 4;
        let stack = random_stack(&mut rng, Some(q));
        let top = select_patches(&final_attention(&stack, &w).unwrap(), 1, &rect).unwrap();
        hits += usize::from(top.ranked[0].index as usize == q);
    }
    ensure(hits == 100, || format!("one-quadrant stacks selected {hits}/100"))?;
    Ok(format!("max error {worst:.1e}, one-quadrant 100/100"))
}

fn fusion_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let random_pred = |rng: &mut ChaCha8Rng, h: usize, w: usize| {
        SegPrediction::new(
            Grid::new(h, w, (0..h * w).map(|_| rng.gen_range(0..5u16)).collect()).unwrap(),
            // coarse grid of probabilities so ties occur
            Grid::new(h, w, (0..h * w).map(|_| rng.gen_range(0..8) as f32 / 8.0).collect()).unwrap(),
        )
        .unwrap()
    };
    for case in 0..1000 {
        let coarse = random_pred(&mut rng, 8, 8);
        let refs: Vec<(GeoRect, SegPrediction)> = (0..rng.gen_range(0..4))
            .map(|_| {
                let (x0, y0) = (rng.gen_range(0..8u32), rng.gen_range(0..8u32));
                let (x1, y1) = (rng.gen_range(x0 + 1..=8), rng.gen_range(y0 + 1..=8));
                let rect = GeoRect::new(x0, y0, x1, y1).unwrap();
                (rect, random_pred(&mut rng, rect.height(), rect.width()))
            })
            .collect();
        let got = probability_fusion(&coarse, &refs).map_err(|e| e.to_string())?;
        for r in 0..8 {
            for c in 0..8 {
                let (mut label, mut prob) = (coarse.labels().get(r, c), coarse.probs().get(r, c));
                for (rect, p) in &refs {
                    if rect.contains(c as u32, r as u32) {
                        let (pr, pc) = (r - rect.y0 as usize, c - rect.x0 as usize);
                        if p.probs().get(pr, pc) > prob {
                            label = p.labels().get(pr, pc);
                            prob = p.probs().get(pr, pc);
                        }
                    }
                }
                ensure(got.labels().get(r, c) == label && got.probs().get(r, c) == prob, || {
                    format!("case {case} pixel ({r},{c})")
                })?;
            }
        }
    }
    Ok("1000 random 8x8 instances exact".into())
}

fn miou_hand_check() -> Check {
    let g = |v: &[u16]| Grid::new(1, 4, v.to_vec()).unwrap();
    let gt = g(&[0, 0, 1, 1]);
    let m = miou(&g(&[0, 1, 1, 1]), &gt, 2).map_err(|e| e.to_string())?;
    ensure((m - 58.33).abs() <= 0.01, || format!("4-pixel example gave {m}"))?;
    let p = miou(&gt, &gt, 2).unwrap();
    ensure(p == 100.0, || format!("pred == gt gave {p}"))?;
    Ok(format!("{m:.4} and {p}"))
}

fn directional() -> Check {
    let seeds = 20u64;
    let mean_fused = |followers: usize, selection: SelectionMethod, fusion: FusionMode| -> Result<f64, String> {
        let mut sum = 0.0;
        for seed in 0..seeds {
            let mut cfg = small_oracle(1000 + seed, followers);
            cfg.scene = Default::default();
            cfg.leader = Default::default();
            cfg.leader.backend = LeaderBackend::Oracle { accuracy: 0.7, confidence: 0.6, hotspots: 2, hotspot_accuracy: 0.2 };
            cfg.selection = selection;
            cfg.fusion = fusion;
            sum += run_scenario(cfg).map_err(|e| e.to_string())?.summary.mean_miou_fused;
        }
        Ok(sum / seeds as f64)
    };
    let att: Vec<f64> = (1..=3)
        .map(|k| mean_fused(k, SelectionMethod::Attention, FusionMode::Prob))
        .collect::<Result<_, _>>()?;
    let rnd: Vec<f64> = (1..=3)
        .map(|k| mean_fused(k, SelectionMethod::Random, FusionMode::Prob))
        .collect::<Result<_, _>>()?;
    let replace = mean_fused(3, SelectionMethod::Attention, FusionMode::Replace)?;
    for k in 0..3 {
        ensure(att[k] > rnd[k], || format!("k={}: attention {:.2} <= random {:.2}", k + 1, att[k], rnd[k]))?;
    }
    ensure(att[0] <= att[1] && att[1] <= att[2], || format!("not monotone in followers: {att:?}"))?;
    ensure(att[2] >= replace, || format!("prob {:.2} < replace {replace:.2}", att[2]))?;
    Ok(format!(
        "attention {:.2}/{:.2}/{:.2} vs random {:.2}/{:.2}/{:.2}; prob {:.2} >= replace {replace:.2}",
        att[0], att[1], att[2], rnd[0], rnd[1], rnd[2], att[2]
    ))
}

fn determinism() -> Check {
    let mut cfg = small_cnn(31, 3, TtaMode::Cross);
    cfg.rounds = 3;
    cfg.corruption = CorruptionKind::Frost;
    cfg.severity = 2;
    cfg.leader.backend = LeaderBackend::Transformer { embed_divisor: 4 };
    let a = run_scenario(cfg.clone()).map_err(|e| e.to_string())?;
    let b = run_scenario(cfg).map_err(|e| e.to_string())?;
    ensure(a.to_json() == b.to_json(), || "JSON reports differ".into())?;
    ensure(a.to_csv() == b.to_csv(), || "CSV reports differ".into())?;
    ensure(a.message_log() == b.message_log(), || "message logs differ".into())?;
    Ok(format!("{} JSON bytes identical", a.to_json().len()))
}

fn half_close(x: f64, q: f64) -> bool {
    let h = f16::from_f64(x);
    q == h.to_f64() && (x - q).abs() <= (x.abs() * 2f64.powi(-11)).max(2f64.powi(-25))
}

fn round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..10_000 {
        let sender = rng.gen();
        let recipient = rng.gen();
        let round = rng.gen();
        let payload = match case % 4 {
            0 => Payload::TaskAssign {
                rects: (0..rng.gen_range(0..5))
                    .map(|_| {
                        let (x0, y0) = (rng.gen_range(0..5000u32), rng.gen_range(0..5000u32));
                        GeoRect::new(x0, y0, x0 + rng.gen_range(1..5000), y0 + rng.gen_range(1..5000)).unwrap()
                    })
                    .collect(),
            },
            1 => {
                let n = rng.gen_range(0..200);
                Payload::Refinement {
                    patch_index: rng.gen_range(0..4),
                    labels: (0..n).map(|_| rng.gen()).collect(),
                    probs: (0..n).map(|_| rng.gen()).collect(),
                }
            }
            2 => Payload::StatShare {
                stats: (0..rng.gen_range(1..5))
                    .map(|_| {
                        let c = rng.gen_range(1..20);
                        NormStats::new(
                            (0..c).map(|_| rng.gen_range(-1000.0..1000.0)).collect(),
                            (0..c).map(|_| rng.gen_range(0.0..1000.0) * rng.gen::<f64>().powi(4)).collect(),
                        )
                        .unwrap()
                    })
                    .collect(),
            },
            _ => {
                let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
                Payload::FinalResult {
                    prediction: SegPrediction::new(
                        Grid::new(h, w, (0..h * w).map(|_| rng.gen()).collect()).unwrap(),
                        Grid::new(h, w, (0..h * w).map(|_| rng.gen()).collect()).unwrap(),
                    )
                    .unwrap(),
                }
            }
        };
        let msg = Message { sender, recipient, round, payload };
        let frame = encode(&msg).map_err(|e| format!("case {case}: {e}"))?;
        ensure(frame.len() == msg.encoded_len(), || format!("case {case}: length"))?;
        let back = decode(&frame).map_err(|e| format!("case {case}: {e}"))?;
        match (&msg.payload, &back.payload) {
            (Payload::StatShare { stats: sent }, Payload::StatShare { stats: got }) => {
                ensure((back.sender, back.recipient, back.round) == (sender, recipient, round), || {
                    format!("case {case}: header")
                })?;
                ensure(sent.len() == got.len(), || format!("case {case}: layer count"))?;
                for (s, g) in sent.iter().zip(got) {
                    let ok = s.mean.iter().zip(&g.mean).chain(s.var.iter().zip(&g.var)).all(|(&x, &q)| half_close(x, q));
                    ensure(ok && s.channels() == g.channels(), || format!("case {case}: statistics beyond half ulp"))?;
                }
            }
            _ => ensure(back == msg, || format!("case {case}: round trip differs"))?,
        }
    }
    Ok("10^4 random messages".into())
}

type Criterion = (&'static str, fn() -> Check, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        ("wire-volume", wire_volume, Duration::from_secs(1)),
        ("tta-oracle-equivalence", tta_oracle, Duration::from_secs(10)),
        ("ema-convexity", ema_convexity, Duration::MAX),
        ("selection-linearity", selection_linearity, Duration::MAX),
        ("fusion-oracle", fusion_oracle, Duration::MAX),
        ("miou-hand-check", miou_hand_check, Duration::MAX),
        ("directional-trends", directional, Duration::from_secs(60)),
        ("determinism", determinism, Duration::MAX),
        ("codec-round-trip", round_trip, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > budget => Err(format!("{detail}; took {took:.2?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {name}: {detail} ({took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({took:.2?})");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
