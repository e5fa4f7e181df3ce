use sugmine::embed::{build_vocab, embed_sequence, padding_mask, sgns_grad, sgns_loss, train_skipgram, SkipGramConfig, CLS, PAD};
use sugmine::textprep::TokenSeq;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// 200 sentences where "good" and "great" fill the same slot and "wifi"
/// only ever appears in a different one.
fn template_corpus() -> Vec<Vec<String>> {
    let nouns = ["room", "staff", "view", "breakfast", "pool"];
    let adverbs = ["really", "very", "truly", "quite"];
    let mut out = Vec::new();
    for i in 0..200 {
        let s = if i % 2 == 0 {
            let adj = if i % 4 == 0 { "good" } else { "great" };
            format!("the {} was {} {adj} overall", nouns[i % 5], adverbs[(i / 5) % 4])
        } else {
            format!("our wifi signal kept dropping in hall {}", ["a", "b", "c"][i % 3])
        };
        out.push(s.split(' ').map(String::from).collect());
    }
    out
}

fn trained(epochs: usize) -> (sugmine::Vocabulary, sugmine::EmbeddingMatrix, Vec<f64>) {
    let corpus = template_corpus();
    let seqs: Vec<TokenSeq> = corpus.iter().map(|t| TokenSeq::new("t", t.clone())).collect();
    let vocab = build_vocab(&seqs, 1).unwrap();
    let cfg = SkipGramConfig {
        d_emb: 16,
        window: 2,
        epochs,
        ..SkipGramConfig::default()
    };
    let (emb, trace) = train_skipgram(&corpus, &vocab, &cfg, None).unwrap();
    (vocab, emb, trace.epoch_loss)
}

#[test]
fn shared_contexts_give_similar_vectors() {
    let (vocab, emb, _) = trained(20);
    let v = |w: &str| emb.vector(vocab.get(w).unwrap());
    let same = cosine(v("good"), v("great"));
    let other = cosine(v("good"), v("wifi"));
    assert!(same > other, "cos(good, great) = {same:.3}, cos(good, wifi) = {other:.3}");
}

#[test]
fn loss_falls_over_epochs() {
    let (_, _, loss) = trained(5);
    assert_eq!(loss.len(), 5);
    assert!(loss[4] < loss[0], "{loss:?}");
}

#[test]
fn gradient_matches_central_differences() {
    let center = [0.3, -0.2, 0.5, 0.1, -0.4];
    let context = [0.1, 0.4, -0.3, 0.2, 0.05];
    let n1 = [-0.2, 0.1, 0.3, -0.5, 0.2];
    let n2 = [0.4, -0.1, 0.0, 0.3, -0.3];
    let negs: Vec<&[f64]> = vec![&n1, &n2];
    let (gc, go, gn) = sgns_grad(&center, &context, &negs);
    let eps = 1e-6;

    // perturbs one coordinate of one of the four vectors
    let fd = |which: usize, j: usize| {
        let mut vs = [center, context, n1, n2];
        vs[which][j] += eps;
        let plus = sgns_loss(&vs[0], &vs[1], &[&vs[2], &vs[3]]);
        vs[which][j] -= 2.0 * eps;
        let minus = sgns_loss(&vs[0], &vs[1], &[&vs[2], &vs[3]]);
        (plus - minus) / (2.0 * eps)
    };
    for j in 0..5 {
        for (which, analytic) in [(0, gc[j]), (1, go[j]), (2, gn[0][j]), (3, gn[1][j])] {
            let numeric = fd(which, j);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "vector {which} coord {j}: {analytic} vs {numeric}");
        }
    }
}

#[test]
fn embedded_sequences_are_finite_and_padded() {
    let (vocab, emb, _) = trained(2);
    let tokens: Vec<String> = ["the", "pool", "was", "unseen"].iter().map(|s| s.to_string()).collect();
    let m = embed_sequence(&tokens, &vocab, &emb, 8);
    assert_eq!((m.rows(), m.cols()), (8, 16));
    assert!(m.data().iter().all(|x| x.is_finite()));
    assert_eq!(m.row(0), emb.vector(CLS));
    let mask = padding_mask(tokens.len(), 8);
    for (i, pad) in mask.iter().enumerate() {
        if *pad {
            assert!(m.row(i).iter().all(|x| *x == 0.0));
        }
    }
    assert!(emb.vector(PAD).iter().all(|x| *x == 0.0));
}
