//! Builds the internal vocabulary and shows how inputs are tokenized.

use quantprobe::synthgen::UnitLexicon;
use quantprobe::tokenizer::{build_vocab, tokenize};

fn main() -> quantprobe::Result<()> {
    let base = build_vocab(None, &[]);
    println!("built-in vocabulary ({} tokens):", base.len());
    print!("{}", base.dump());

    let vocab = build_vocab(Some(&UnitLexicon::builtin()), &[]);
    println!("with the shipped unit lexicon: {} tokens", vocab.len());

    for text in ["10.3%", "15 basis points", "15.3 billion", "27.3-65.1", "41.7 52.0", "14.3 hours", "3.5 furlongs"] {
        let seq = tokenize(text, &vocab)?;
        println!("{text:>16} -> {:?} ids {:?}", seq.surfaces, seq.ids);
        assert_eq!(seq.detokenize(), text);
    }
    Ok(())
}
