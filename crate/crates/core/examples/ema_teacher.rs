//! EMA teacher tracking a student, and the corrected per-pair loss.
//!
//! `cargo run --example ema_teacher`

use npc_core::correction::{ema_update, init_teacher, pair_loss};
use npc_core::encoder::EncoderParams;
use npc_core::numerics::{kl_divergence, softmax};

fn main() -> npc_core::Result<()> {
    let start = EncoderParams::init_uniform(8, 4, true, 0.1, 1);
    let student = EncoderParams::init_uniform(8, 4, true, 0.1, 2);
    let mut teacher = init_teacher(&start, 0.9)?;
    let gap = |t: &EncoderParams| {
        t.values
            .iter()
            .zip(&student.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let initial = gap(&teacher.params);
    println!("step 0: max |teacher - student| = {initial:.5}");
    for step in 1..=30 {
        ema_update(&mut teacher, &student)?;
        if step % 10 == 0 {
            let g = gap(&teacher.params);
            println!(
                "step {step}: gap {g:.5}, ratio to step 0 {:.5} (0.9^{step} = {:.5})",
                g / initial,
                0.9f64.powi(step)
            );
        }
    }

    // A mismatched pair: the student has started to trust the wrong positive,
    // the lagging teacher has not.
    let student_dist = softmax(&[0.9, 0.2, 0.1], 5.0)?;
    let teacher_dist = softmax(&[0.3, 0.6, 0.2], 5.0)?;
    println!("student {:.3?}", student_dist.as_slice());
    println!("teacher {:.3?}", teacher_dist.as_slice());
    println!(
        "KL(student || teacher) = {:.4}",
        kl_divergence(&student_dist, &teacher_dist)?
    );
    println!(
        "loss flagged clean  = {:.4}",
        pair_loss(&student_dist, &teacher_dist, 0, true)?
    );
    println!(
        "loss flagged noisy  = {:.4}",
        pair_loss(&student_dist, &teacher_dist, 0, false)?
    );
    Ok(())
}
