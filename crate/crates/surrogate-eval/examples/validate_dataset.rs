//! Build a small dataset by hand, inject two invariant violations, and show
//! what the validator reports.

use surrogate_eval::data::{validate, LongitudinalDataset, SubjectRecord, TimeGrid};

fn subject(id: &str, g: u8) -> SubjectRecord {
    SubjectRecord {
        id: id.to_string(),
        x: vec![0.3],
        g,
        a: vec![true, true, true],
        y: vec![Some(true), Some(true), Some(true)],
        s: vec![Some(0.4), Some(-0.2)],
    }
}

fn main() {
    let grid = TimeGrid::new(3, 2).expect("valid grid");
    let mut dataset = LongitudinalDataset {
        grid,
        subjects: vec![subject("ok-1", 1), subject("ok-2", 0), subject("bad-1", 1)],
        covariate_names: vec!["age".to_string()],
    };

    println!("clean dataset: {} violations", validate(&dataset).len());

    // Violation 1: censoring comes back after going away.
    dataset.subjects[2].a = vec![true, false, true];
    dataset.subjects[2].y = vec![Some(true), None, Some(true)];
    dataset.subjects[2].s = vec![Some(0.1), None];
    // Violation 2: a surrogate recorded for a subject who had the event.
    dataset.subjects[1].y = vec![Some(false), None, None];
    dataset.subjects[1].a = vec![true, false, false];

    let violations = validate(&dataset);
    println!("after corruption: {} violations", violations.len());
    for v in &violations {
        println!(
            "  subject {:?} field {}: {}",
            v.subject_id, v.field, v.message
        );
    }
}
