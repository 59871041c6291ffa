use super::*;
use crate::autograd::{log_softmax_rows, softmax_rows};
use crate::rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        max_positions: 24,
        vocab_size: 23,
        num_languages: 2,
        activation: Activation::Gelu,
    }
}

fn model(seed: u64) -> Seq2SeqModel<f64> {
    Seq2SeqModel::new(tiny(), &mut rng::stream(seed, "init")).unwrap()
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn config_validation() {
    let mut c = tiny();
    c.n_heads = 3;
    assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
    let mut c = tiny();
    c.vocab_size = NUM_SPECIAL;
    assert!(c.validate().is_err());
    assert!(tiny().validate().is_ok());
}

#[test]
fn zeroed_tables_embed_to_zero() {
    let m = Seq2SeqModel::<f64>::zeroed(tiny()).unwrap();
    let e = m.embed(&[6, 7, 8], &[0, 1, 0]).unwrap();
    assert!(e.iter().all(|&v| v == 0.0));
}

#[test]
fn embedding_is_additive_in_language_tag() {
    let m = model(1);
    let a = m.embed(&[6, 7, 8], &[0, 0, 0]).unwrap();
    let b = m.embed(&[6, 7, 8], &[0, 1, 0]).unwrap();
    let lang = &m.param(m.language_embeddings()).value;
    let delta = &lang.row(1) - &lang.row(0);
    for j in 0..16 {
        assert!((b[[1, j]] - a[[1, j]] - delta[j]).abs() < 1e-12);
        assert_eq!(a[[0, j]], b[[0, j]]);
    }
}

#[test]
fn embed_rejects_bad_inputs() {
    let m = model(1);
    assert!(matches!(
        m.embed(&[6; 25], &[0; 25]),
        Err(ModelError::TooLong { len: 25, max: 24 })
    ));
    assert!(matches!(
        m.embed(&[6], &[2]),
        Err(ModelError::LanguageOutOfRange { id: 2, .. })
    ));
    assert!(matches!(
        m.embed(&[23], &[0]),
        Err(ModelError::TokenOutOfRange { id: 23, .. })
    ));
    assert!(matches!(m.embed(&[6, 7], &[0]), Err(ModelError::Shape(_))));
}

/// Central differences of an embedding-only loss, checked against the tape.
#[test]
fn embedding_gradients_match_finite_differences() {
    let m = model(2);
    let ids = [6u32, 9, 6, 12];
    let langs = [0usize, 0, 1, 1];
    let targets = [3usize, 1, 7, 2];
    let loss_of = |m: &Seq2SeqModel<f64>| -> f64 {
        let e = m.embed(&ids, &langs).unwrap();
        let lp = log_softmax_rows(e.view());
        -targets.iter().enumerate().map(|(i, &t)| lp[[i, t]]).sum::<f64>()
    };
    let mut batch = Packed::default();
    batch.push(&ids, &langs).unwrap();
    let mut g = Graph::new(&m, GroupSet::all());
    let e = g.embed(&batch).unwrap();
    let loss = g.tape_mut().cross_entropy(e, &targets, &[1.0; 4]);
    let grads = g.gradients(loss);
    for pid in [m.token_embeddings(), m.position_embeddings(), m.language_embeddings()] {
        let analytic = grads.get(pid).unwrap();
        let (rows, cols) = analytic.dim();
        for r in 0..rows.min(13) {
            for c in 0..cols {
                let h = 1e-5;
                let mut plus = m.clone();
                plus.param_mut(pid).value[[r, c]] += h;
                let mut minus = m.clone();
                minus.param_mut(pid).value[[r, c]] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "{} [{r},{c}]: {a} vs {numeric}", m.param(pid).name);
            }
        }
    }
}

#[test]
fn single_token_encoding_shape() {
    let m = model(3);
    let h = m.encode(&[6], &[0], None).unwrap();
    assert_eq!(h.dim(), (1, 16));
}

#[test]
fn padding_does_not_affect_real_positions() {
    let m = model(4);
    let base = m.encode(&[6, 7, 8], &[0, 0, 0], None).unwrap();
    for pad_token in [1u32, 9, 20] {
        let padded = m
            .encode(&[6, 7, 8, pad_token], &[0, 0, 0, 0], Some(&[false, false, false, true]))
            .unwrap();
        let real = padded.slice(ndarray::s![0..3, ..]).to_owned();
        assert!(max_abs_diff(&base, &real) < 1e-6);
    }
}

#[test]
fn encoding_is_pure() {
    let m = model(5);
    let a = m.encode(&[6, 7, 8, 9], &[0, 1, 1, 0], None).unwrap();
    let b = m.encode(&[6, 7, 8, 9], &[0, 1, 1, 0], None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decoder_is_causal() {
    let m = model(6);
    let mem = m.encode(&[6, 7, 8], &[0, 0, 0], None).unwrap();
    let target = [BOS_ID, 10, 11, 12, 13];
    let base = m.decode_forward(&mem, None, &target, 1).unwrap();
    assert_eq!(base.dim(), (5, 23));
    for t in 0..4 {
        let mut changed = target;
        for v in changed.iter_mut().skip(t + 1) {
            *v = 20;
        }
        let other = m.decode_forward(&mem, None, &changed, 1).unwrap();
        let prefix_a = base.slice(ndarray::s![0..=t, ..]).to_owned();
        let prefix_b = other.slice(ndarray::s![0..=t, ..]).to_owned();
        assert!(max_abs_diff(&prefix_a, &prefix_b) < 1e-6);
    }
}

const BOS_ID: TokenId = crate::vocab::BOS;

#[test]
fn target_language_tag_changes_logits() {
    let m = model(7);
    let mem = m.encode(&[6, 7, 8], &[0, 0, 0], None).unwrap();
    let a = m.decode_forward(&mem, None, &[BOS_ID, 9], 0).unwrap();
    let b = m.decode_forward(&mem, None, &[BOS_ID, 9], 1).unwrap();
    assert!(max_abs_diff(&a, &b) > 1e-3);
}

#[test]
fn decoder_respects_source_padding() {
    let m = model(8);
    let mem = m.encode(&[6, 7, 8], &[0, 0, 0], None).unwrap();
    let padded = m
        .encode(&[6, 7, 8, 15], &[0, 0, 0, 0], Some(&[false, false, false, true]))
        .unwrap();
    let a = m.decode_forward(&mem, None, &[BOS_ID, 9], 1).unwrap();
    let b = m
        .decode_forward(&padded, Some(&[false, false, false, true]), &[BOS_ID, 9], 1)
        .unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-6);
    assert!(m.decode_forward(&padded, Some(&[false]), &[BOS_ID], 1).is_err());
}

#[test]
fn mlm_head_selection_identity() {
    let m = model(9);
    let states = m.encode(&[6, 7, 8, 9], &[0; 4], None).unwrap();
    let all = m.mlm_head(&states, &[0, 1, 2, 3]).unwrap();
    let some = m.mlm_head(&states, &[2]).unwrap();
    assert_eq!(all.dim(), (4, 23));
    assert_eq!(all.row(2), some.row(0));
    assert!(m.mlm_head(&states, &[4]).is_err());
    for row in softmax_rows(all.view()).outer_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn tied_projection_links_input_and_output() {
    let m = model(10);
    let states = m.encode(&[6, 7], &[0, 0], None).unwrap();
    let logits = m.mlm_head(&states, &[0, 1]).unwrap();
    let mut edited = m.clone();
    let tok = edited.token_embeddings();
    // A uniform shift would be cancelled by layer norm; tilt the row instead.
    for (j, v) in edited.param_mut(tok).value.row_mut(6).iter_mut().enumerate() {
        *v += 0.1 * j as f64;
    }
    let states2 = edited.encode(&[6, 7], &[0, 0], None).unwrap();
    assert!(max_abs_diff(&states, &states2) > 1e-6);
    // With the encoder states held fixed only logit column 6 moves.
    let logits2 = edited.mlm_head(&states, &[0, 1]).unwrap();
    for v in 0..23 {
        let moved = (0..2).any(|r| (logits[[r, v]] - logits2[[r, v]]).abs() > 1e-9);
        assert_eq!(moved, v == 6, "column {v}");
    }
}

#[test]
fn partition_is_disjoint_and_exhaustive() {
    let m = model(11);
    let parts = m.partition_params();
    let mut seen: Vec<ParamId> = parts.iter().flat_map(|(_, ids)| ids.clone()).collect();
    seen.sort();
    let all: Vec<ParamId> = m.param_ids().collect();
    assert_eq!(seen, all);
    for (group, ids) in &parts {
        let count: usize = ids.iter().map(|&id| m.param(id).value.len()).sum();
        assert_eq!(count, m.config().group_param_count(*group), "{group}");
    }
    let enc = &parts
        .iter()
        .find(|(g, _)| *g == ParamGroup::EncoderLayers)
        .unwrap()
        .1;
    for id in [m.token_embeddings(), m.position_embeddings(), m.language_embeddings()] {
        assert!(!enc.contains(&id));
    }
    assert_eq!(m.param_count(), m.config().param_count());
}

#[test]
fn group_counts_match_hand_count() {
    // 1+1 layers, d=4, ffn=8, 5 positions, 10 tokens, 2 languages:
    //   word 10*4 = 40; tag/pos (5+2)*4 = 28; head 10
    //   encoder: norms 3*8 + attn 4*(16+4) + ffn (32+8+32+4) = 180
    //   decoder: norms 4*8 + attn 2*80 + ffn 76 = 268
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 4,
        n_heads: 2,
        d_ffn: 8,
        max_positions: 5,
        vocab_size: 10,
        num_languages: 2,
        activation: Activation::Gelu,
    };
    let m = Seq2SeqModel::<f32>::zeroed(cfg).unwrap();
    let count = |g| {
        m.partition_params()
            .into_iter()
            .find(|(h, _)| *h == g)
            .unwrap()
            .1
            .iter()
            .map(|&id| m.param(id).value.len())
            .sum::<usize>()
    };
    assert_eq!(count(ParamGroup::WordEmbeddings), 40);
    assert_eq!(count(ParamGroup::TagAndPositionEmbeddings), 28);
    assert_eq!(count(ParamGroup::OutputHead), 10);
    assert_eq!(count(ParamGroup::EncoderLayers), 180);
    assert_eq!(count(ParamGroup::DecoderLayers), 268);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = model(12);
    let meta = CheckpointMeta {
        languages: vec!["la".into(), "lb".into()],
        label: "stage1".into(),
        step: 42,
    };
    let bytes = write_checkpoint(&m, &meta);
    let (back, meta_back) = read_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.params(), m.params());
    assert_eq!(write_checkpoint(&back, &meta), bytes);
    // f32 storage widens losslessly to f64.
    let small = m.cast::<f32>();
    let (wide, _) = read_checkpoint::<f64>(&write_checkpoint(&small, &meta)).unwrap();
    assert_eq!(wide.digest(GroupSet::all()), small.cast::<f64>().digest(GroupSet::all()));
}

#[test]
fn checkpoint_shape_mismatch_fails_loudly() {
    let m = model(13);
    let bytes = write_checkpoint(&m, &CheckpointMeta::default());
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    header["config"]["d_model"] = serde_json::json!(8);
    header["config"]["d_ffn"] = serde_json::json!(16);
    let new_header = serde_json::to_vec(&header).unwrap();
    let mut tampered = bytes[..8].to_vec();
    tampered.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
    tampered.extend_from_slice(&new_header);
    tampered.extend_from_slice(&bytes[16 + header_len..]);
    let err = read_checkpoint::<f64>(&tampered).unwrap_err();
    assert!(err.to_string().contains("does not match config"), "{err}");
    assert!(read_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
    assert!(read_checkpoint::<f64>(b"nonsense-bytes-here").is_err());
}

#[test]
fn digest_tracks_group_contents() {
    let m = model(14);
    let mut edited = m.clone();
    let bias = edited.output_bias();
    edited.param_mut(bias).value[[0, 3]] += 1.0;
    let enc = GroupSet::of(&[ParamGroup::EncoderLayers]);
    let head = GroupSet::of(&[ParamGroup::OutputHead]);
    assert_eq!(m.digest(enc), edited.digest(enc));
    assert_ne!(m.digest(head), edited.digest(head));
}
