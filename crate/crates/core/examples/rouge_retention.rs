//! ROUGE-L F between candidate and reference answers, and the
//! student/teacher retention ratio.
//!
//!     cargo run --example rouge_retention

use kdlab::evalmetrics::{retention, rouge_l};

fn main() -> kdlab::Result<()> {
    let reference = "the capital is paris.";
    for cand in [
        "the capital is paris.",
        "capital is paris",
        "paris.",
        "the capital is rome.",
        "",
    ] {
        let s = rouge_l(cand, reference);
        println!("{cand:<24} P {:.3} R {:.3} F {:.3}", s.precision, s.recall, s.f);
    }
    // aggregate ROUGE-L of a student vs its teacher, in percent
    for (student, teacher) in [(20.4, 27.1), (19.7, 20.6)] {
        let r = retention(&[student], &[teacher])?.expect("teacher score is nonzero");
        println!("student {student} / teacher {teacher} -> retention {r:.1}%");
    }
    Ok(())
}
