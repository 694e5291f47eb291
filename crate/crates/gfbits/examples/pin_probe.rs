// temporary probe; deleted after pinning values
use gfbits::bitalloc::{mean_activation_log, model_size_mb, ConstraintSet, PenaltyNormalization};
use gfbits::data::{synthetic_gaussian, Split};
use gfbits::metrics::NullSink;
use gfbits::network::{build_model, Arch, Mode};
use gfbits::trainer::*;
use std::rc::Rc;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let train = Rc::new(synthetic_gaussian(&[1, 8, 8], 4, 2000, 42, Split::Train).unwrap());
    let test = Rc::new(synthetic_gaussian(&[1, 8, 8], 4, 400, 42, Split::Test).unwrap());
    let arch = Arch::CnnSmall { input_shape: [1, 8, 8], channels: [6, 6, 12, 12], classes: 4 };
    let cfg = TrainConfig {
        epochs: 15, batch_size: 32, momentum: 0.9, lr_max: 0.02,
        warmup_epochs: 2, mixup_alpha: 0.2, hflip: false, crop_padding: 0, mixup: false,
    };
    let mut st = build_model(&arch, 42).unwrap();
    pretrain(&mut st, &train, 4, &cfg, 42, &mut NullSink).unwrap();
    let (_, st_acc) = evaluate_split(&st, &test, Mode::Quantized).unwrap();
    println!("[{:>6.1?}] static-4 test acc = {st_acc:.4}", t0.elapsed());

    let cs = ConstraintSet::new([0.7, 0.7], [0.5, 0.5], 4, st.param_counts(),
        PenaltyNormalization::RelativeToTarget).unwrap();
    println!("C1 = {:.6} MB, C2 = {:.4}; static MB = {:.6}", cs.c1_mb, cs.c2,
        model_size_mb(&cs.v_static.extract_bits().0, cs.counts()).unwrap());
    let alt = AlternationConfig {
        rounds: 3, gf_steps: 4, gb_epochs: 4, evals_per_step: 512, sigma0: 0.5,
        superbatch: SuperBatchConfig { n_minibatches: 8, batch_size: 32, policy: gfbits::superbatch::Policy::Sb, frozen_snapshot: false },
    };
    let mut model = st;
    let out = alternate(&mut model, &train, &test, &cfg, &alt, &cs, 42, &mut NullSink, 0, None, |r, _, b| {
        let (rw, rx) = b.v.extract_bits();
        println!("[{:>6.1?}] round {r}: best obj {:.4} bits w{rw:?} x{rx:?}", t0.elapsed(), b.objective);
        Ok(())
    }).unwrap();

    let (r_w, r_x) = out.best.v.extract_bits();
    let mb = model_size_mb(&r_w, &model.param_counts()).unwrap();
    let penalty = cs.penalty(mb, mean_activation_log(out.best.v.act_part()));
    let (_, dyn_acc) = evaluate_split(&model, &test, Mode::Quantized).unwrap();
    println!("[{:>6.1?}] dynamic r_w {r_w:?} r_x {r_x:?}", t0.elapsed());
    println!("MB = {mb:.6} vs C1 = {:.6} (ok: {}), residual {penalty:.6}", cs.c1_mb, mb <= cs.c1_mb);
    println!("dyn acc {dyn_acc:.4} vs static acc — margin must be >= -0.01");
}
