//! Synthesis: predicted pauses are inserted into the encoded phonemes, the
//! augmented sequence is re-encoded, durations upsample the fused
//! content+style representation into μ, and the vector field is integrated
//! from seeded noise. Deterministic given checkpoint and seed.

use crate::corpus::MelSpectrogram;
use crate::error::{Error, Result};
use crate::flow::synthesize_mel;
use crate::nn::bind_params;
use crate::scalar::Scalar;
use crate::style::VqMode;
use crate::tape::Tape;

use super::ckpt::LoadedCheckpoint;

/// Where style conditioning comes from at synthesis time.
pub enum StyleSource<'a, F> {
    /// Extract A_g and A_l from a reference mel.
    ReferenceMel(&'a MelSpectrogram<F>),
    /// Use the per-speaker statistics cached at training time.
    SpeakerCache,
    /// No style conditioning (style-off checkpoints).
    None,
}

pub fn synthesize<F: Scalar>(
    ckpt: &LoadedCheckpoint<F>,
    tokens: &[usize],
    speaker: Option<&str>,
    style: StyleSource<'_, F>,
    seed: u64,
) -> Result<MelSpectrogram<F>> {
    let model = &ckpt.model;
    let params = &ckpt.params;
    let flags = ckpt.meta.flags;

    let mut tape: Tape<F> = Tape::inference();
    let vars = bind_params(&mut tape, params);

    // rhythm stage
    let e = model.rhythm.encode_phonemes_t(&mut tape, &vars, tokens)?;
    let (h_c, durations) = if flags.rhythm {
        let probs = model.rhythm.predict_pauses_t(&mut tape, &vars, e);
        let pred = crate::rhythm::PausePrediction {
            probs: tape.value(probs).clone(),
        };
        let classes = pred.argmax_classes();
        let e_aug = model.rhythm.insert_pauses_t(&mut tape, &vars, e, &classes);
        let h_c = model.rhythm.encode_augmented_t(&mut tape, &vars, e_aug);
        let logd = model.rhythm.predict_durations_t(&mut tape, &vars, h_c);
        let frames = crate::rhythm::DurationPrediction {
            log_durations: tape.value(logd).data().to_vec(),
        }
        .to_frame_counts();
        (h_c, frames)
    } else {
        let h_c = model.rhythm.encode_augmented_t(&mut tape, &vars, e);
        let logd = model.rhythm.predict_durations_t(&mut tape, &vars, h_c);
        let frames = crate::rhythm::DurationPrediction {
            log_durations: tape.value(logd).data().to_vec(),
        }
        .to_frame_counts();
        (h_c, frames)
    };

    // style stage
    let (a_g, a_l) = if flags.style {
        match style {
            StyleSource::ReferenceMel(mel) => {
                mel.validate()?;
                if mel.dim() != ckpt.meta.n_mels {
                    return Err(Error::Shape(format!(
                        "reference mel dimension {} but model expects {}",
                        mel.dim(),
                        ckpt.meta.n_mels
                    )));
                }
                let mel_v = tape.constant(mel.frames.clone());
                let a_g = model.style.global_style_t(&mut tape, &vars, mel_v);
                let local = model
                    .style
                    .local_style_t(&mut tape, &vars, mel_v, VqMode::Hard);
                let a_l =
                    model
                        .style
                        .align_local_style_t(&mut tape, &vars, local.quantized, h_c);
                (Some(a_g), Some(a_l))
            }
            StyleSource::SpeakerCache => {
                let spk = speaker.ok_or(Error::MissingStyleSource)?;
                let codebook = params.tensor(model.style.codebook_param());
                let (ag, local) = ckpt
                    .style_cache
                    .global_for(spk)
                    .zip(ckpt.style_cache.local_for(spk, codebook))
                    .ok_or(Error::MissingStyleSource)?;
                let ag_v = tape.constant(ag.vector);
                let rows_v = tape.constant(local.frames);
                let a_l = model
                    .style
                    .align_local_style_t(&mut tape, &vars, rows_v, h_c);
                (Some(ag_v), Some(a_l))
            }
            StyleSource::None => return Err(Error::MissingStyleSource),
        }
    } else {
        (None, None)
    };

    // speaker embedding: explicit speaker, else the table mean
    let spk_emb = match speaker {
        Some(id) => {
            let index = ckpt.meta.speaker_index(id)?;
            model.flow.speaker_embedding_t(&mut tape, &vars, index)
        }
        None => model.flow.mean_speaker_embedding_t(&mut tape, &vars),
    };

    let (mu, _) = model
        .flow
        .build_mu_t(&mut tape, &vars, h_c, a_g, a_l, spk_emb, &durations)?;
    let mu_value = tape.value(mu).clone();

    let mut mel = synthesize_mel(
        &model.flow,
        params,
        &mu_value,
        &ckpt.meta.otcfm,
        seed,
        ckpt.meta.frame_shift_s,
    )?;
    // round to storage precision so the in-memory result equals a MEL1
    // round trip
    mel.round_to_storage();
    Ok(mel)
}
