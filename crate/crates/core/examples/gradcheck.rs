//! Compares analytic gradients of the full pipeline with central finite
//! differences on the tiny canonical instance.

use landmark_match::training::{canonical_instance, pipeline_gradcheck, DEFAULT_FD_STEP};

fn main() -> landmark_match::Result<()> {
    let inst = canonical_instance(0)?;
    println!("parameters: {}", inst.model.parameter_count());
    let report = pipeline_gradcheck(&inst, 400, DEFAULT_FD_STEP, 1)?;
    println!("probes: {}", report.probes);
    println!("max relative error: {:.3e}", report.max_rel_error);
    if let Some((name, index)) = &report.worst {
        println!("worst probe: {name}[{index}]");
    }
    Ok(())
}
