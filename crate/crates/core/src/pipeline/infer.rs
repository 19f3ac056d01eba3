//! Inference: arbitrary `(R, S_H, S_W)` expansion of an LR sequence.
//!
//! Flows are estimated once per adjacent pair. Frames at input timestamps
//! come straight from stage-1 features; frames at `t_j = j/R` between each
//! pair come from stage-2 features. Output frames are handed to a sink as
//! soon as they are ready, so peak activation memory does not scale with
//! the output count.

use crate::error::{Error, Result};
use crate::pipeline::data::FrameSequence;
use crate::pipeline::model::SpaceTimeModel;
use crate::tensor::{no_grad, Tensor};
use crate::upsample::ScaleSpec;
use ndarray::{Array3, Ix3};

/// Receives `(output_index, timestamp, frame)` for every produced frame, in
/// temporal order.
pub type FrameSink<'a> = dyn FnMut(usize, f64, Array3<f64>) -> Result<()> + 'a;

fn tensor_to_frame(t: &Tensor) -> Array3<f64> {
    t.to_array().into_dimensionality::<Ix3>().unwrap()
}

/// Runs the three stages over `seq` and streams `R*(N-1)+1` frames of size
/// `(ceil(H*S_H), ceil(W*S_W))` into `sink`.
pub fn run_inference_streaming(
    model: &SpaceTimeModel,
    seq: &FrameSequence,
    scale: &ScaleSpec,
    sink: &mut FrameSink<'_>,
) -> Result<()> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::EmptyInput("run_inference"));
    }
    if scale.r > 1 && n < 2 {
        return Err(Error::invalid(
            "temporal upscaling needs at least two input frames",
        ));
    }
    model.check_scale_supported(scale)?;

    no_grad(|| -> Result<()> {
        let (flows_fwd, flows_bwd) = model.compute_flow_pairs(&seq.frames)?;
        let features = model.extractor.extract(&seq.frames, scale)?;
        let enhanced = model
            .propagation
            .propagate(&features, &flows_fwd, &flows_bwd)?;

        let r = scale.r;
        let total = r * (n - 1) + 1;
        let time_of = |global: usize| {
            if total == 1 {
                0.0
            } else {
                global as f64 / (total - 1) as f64
            }
        };
        for i in 0..n {
            let out = model
                .upsampler
                .upsample(&enhanced[i], scale, &seq.frames[i])?;
            sink(i * r, time_of(i * r), tensor_to_frame(&out))?;
            if i + 1 < n {
                for j in 1..r {
                    let t = j as f64 / r as f64;
                    let feat_t = model.temporal.interpolate_feature(
                        &enhanced[i],
                        &enhanced[i + 1],
                        &flows_fwd[i],
                        &flows_bwd[i],
                        t,
                    )?;
                    let base = model.base_for_t(
                        &seq.frames[i],
                        &seq.frames[i + 1],
                        &flows_fwd[i],
                        &flows_bwd[i],
                        t,
                    )?;
                    let out = model.upsampler.upsample(&feat_t, scale, &base)?;
                    sink(i * r + j, time_of(i * r + j), tensor_to_frame(&out))?;
                }
            }
        }
        Ok(())
    })
}

/// Convenience wrapper collecting the streamed frames into a sequence.
pub fn run_inference(
    model: &SpaceTimeModel,
    seq: &FrameSequence,
    scale: &ScaleSpec,
) -> Result<FrameSequence> {
    let mut frames = Vec::new();
    run_inference_streaming(model, seq, scale, &mut |_, _, frame| {
        frames.push(frame);
        Ok(())
    })?;
    FrameSequence::new(frames, seq.source_path.clone())
}
