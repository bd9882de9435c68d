use ctxpress_core::model::{read_checkpoint, write_checkpoint, Model, ModelConfig};
use ctxpress_core::tokenizer::{tokenize, BOS, VOCAB_SIZE};

fn small(seed: u64) -> Model {
    Model::new(ModelConfig { enc_layers: 2, dec_layers: 2, d_model: 16, ffn_dim: 32, heads: 4, vocab: VOCAB_SIZE, max_seq: 128, seed })
        .unwrap()
}

#[test]
fn encoder_states_have_one_row_per_token() {
    let m = small(1);
    let enc = m.encode(&tokenize("owls sat. The code for AAA is 111.")).unwrap();
    assert_eq!(enc.shape(), &[34, 16]);
    assert!(enc.is_finite());
}

#[test]
fn generation_decoder_is_causal() {
    let m = small(2);
    let enc = m.encode(&tokenize("foxes ran. bees sang.")).unwrap();
    let mut prefix = vec![BOS];
    prefix.extend(tokenize("what ran"));
    let long = m.next_token_logits(&prefix, &enc).unwrap();
    for cut in 1..prefix.len() {
        let short = m.next_token_logits(&prefix[..cut], &enc).unwrap();
        for r in 0..cut {
            assert_eq!(short.row(r), long.row(r), "row {r} changed when later tokens were appended");
        }
    }
}

#[test]
fn cross_attention_rows_sum_to_one_and_trace_extends_by_prefix() {
    let m = small(3);
    let doc = tokenize("seas rose. The code for BBB is 222. oaks grew.");
    let enc = m.encode(&doc).unwrap();
    let (tokens, trace) = m.forward_with_trace(&tokenize("What is the code for BBB?"), &enc, 4).unwrap();
    assert_eq!(tokens.len(), trace.len());
    for step in &trace {
        assert_eq!(step.layers.len(), 2);
        for layer in &step.layers {
            let s = layer.map.shape();
            assert_eq!((s[0], s[2]), (4, doc.len()));
            assert_eq!(layer.grad.shape(), s);
            for row in layer.map.data().chunks(s[2]) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
    for w in trace.windows(2) {
        let (a, b) = (&w[0].layers[0].map, &w[1].layers[0].map);
        let (rows, cols) = (a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[1], rows + 1);
        for h in 0..4 {
            let old = &a.data()[h * rows * cols..(h + 1) * rows * cols];
            let new = &b.data()[h * (rows + 1) * cols..h * (rows + 1) * cols + rows * cols];
            assert_eq!(old, new);
        }
    }
}

#[test]
fn traced_tokens_match_greedy_decoding() {
    let m = small(4);
    let enc = m.encode(&tokenize("hills fell. cats hid.")).unwrap();
    let ins = tokenize("who hid?");
    let greedy = m.generate_greedy(&ins, &enc, 6).unwrap();
    let (traced, _) = m.forward_with_trace(&ins, &enc, 6).unwrap();
    assert_eq!(greedy, traced);
    assert_eq!(greedy, m.generate_greedy(&ins, &enc, 6).unwrap());
    assert_eq!(m.generate_greedy(&ins, &enc, 1).unwrap().len(), 1);
    assert!(m.generate_greedy(&ins, &enc, 0).is_err());
}

#[test]
fn ranking_reads_the_whole_instruction() {
    let m = small(5);
    let enc = m.encode(&tokenize("rain fell.")).unwrap();
    let a = m.rank_score(&tokenize("rain x"), &enc).unwrap();
    let b = m.rank_score(&tokenize("rain y"), &enc).unwrap();
    assert_ne!(a, b);
    let batch = m.rank_scores(&tokenize("rain x"), &[enc.clone(), enc]).unwrap();
    assert!((batch[0] - a).abs() < 1e-12 && (batch[1] - a).abs() < 1e-12);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let m = small(6);
    let mut bytes = Vec::new();
    write_checkpoint(&m, &mut bytes).unwrap();
    let back = read_checkpoint(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(bytes, again);
    let doc = tokenize("elms grew.");
    assert_eq!(m.encode(&doc).unwrap(), back.encode(&doc).unwrap());
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn same_seed_same_weights() {
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_checkpoint(&small(7), &mut a).unwrap();
    write_checkpoint(&small(7), &mut b).unwrap();
    assert_eq!(a, b);
    let mut c = Vec::new();
    write_checkpoint(&small(8), &mut c).unwrap();
    assert_ne!(a, c);
}

#[test]
fn out_of_vocabulary_tokens_are_rejected() {
    let m = small(9);
    assert!(m.encode(&[VOCAB_SIZE]).is_err());
    assert!(m.encode(&[]).is_err() || m.encode(&[]).unwrap().shape()[0] == 0);
}
