//! Interleaving text, keyframe and motion tokens into one sequence, checking
//! it against the grammar and writing it in both token formats.

use motok::sequence::{
    build_sequence, read_jsonl, read_tseq_all, segments_of, validate, write_jsonl, write_tseq_all, ClipTokens, Order,
    Pair, UnifiedVocab,
};

fn main() -> motok::Result<()> {
    let vocab = UnifiedVocab::new(256, 16, 32)?;
    let clip = |v: usize, m: usize| -> motok::Result<ClipTokens> {
        Ok(ClipTokens {
            visual: (0..4).map(|i| vocab.visual_id((v + i) % 16)).collect::<motok::Result<_>>()?,
            motion: (0..6).map(|i| vocab.motion_id((m + i) % 32)).collect::<motok::Result<_>>()?,
        })
    };
    let pairs = vec![Pair {
        text: vocab.encode_text("a ball rolls")?,
        clips: vec![clip(0, 3)?, clip(5, 9)?],
    }];
    let seq = build_sequence(&vocab, &pairs, Order::TextFirst)?;
    println!("{} tokens, signature {:016x}", seq.len(), vocab.signature());
    for s in segments_of(&vocab, &seq.ids)? {
        println!("  {s:?}");
    }
    validate(&vocab, &seq).expect("builder output is valid");

    let mut broken = seq.clone();
    broken.ids.swap(1, 20);
    println!("after a swap: {}", validate(&vocab, &broken).unwrap_err());

    let jsonl = write_jsonl(&vocab, std::slice::from_ref(&seq))?;
    assert_eq!(read_jsonl(&vocab, std::str::from_utf8(&jsonl).unwrap())?, vec![seq.clone()]);
    let tseq = write_tseq_all(&vocab, std::slice::from_ref(&seq));
    assert_eq!(read_tseq_all(&vocab, &tseq)?, vec![seq]);
    println!("JSONL {} bytes, TSEQ {} bytes", jsonl.len(), tseq.len());
    Ok(())
}
