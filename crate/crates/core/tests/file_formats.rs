use priority_sampling::bench::{build_training_corpus, write_corpus, TaskFamily};
use priority_sampling::model::parse_corpus;
use priority_sampling::{NGramModel, SequenceModel, Vocabulary};

#[test]
fn vocab_model_and_corpus_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let family = TaskFamily::new(3, 8, 4).unwrap();
    let vocab = family.vocab();
    let vpath = dir.path().join("vocab.txt");
    vocab.save(&vpath).unwrap();
    let loaded = Vocabulary::load(&vpath).unwrap();
    assert_eq!(loaded.surfaces(), vocab.surfaces());
    assert_eq!(loaded.eos(), vocab.eos());

    let corpus = build_training_corpus(&family.tasks(0..15), 40, 3).unwrap();
    let cpath = dir.path().join("corpus.txt");
    write_corpus(&cpath, &corpus, vocab).unwrap();
    let back = parse_corpus(&std::fs::read_to_string(&cpath).unwrap(), &loaded).unwrap();
    assert_eq!(back, corpus);

    let model = NGramModel::train(loaded.clone(), &back, 2, 0.05).unwrap();
    let mpath = dir.path().join("m.ngram");
    model.save(&mpath, "vocab.txt").unwrap();
    let (again, vref) = NGramModel::load(&mpath, loaded).unwrap();
    assert_eq!(vref, "vocab.txt");
    assert_eq!(again.max_length(), model.max_length());
    for seq in &corpus {
        for i in 0..seq.len() {
            assert_eq!(again.next_distribution(&seq[..i]).unwrap(), model.next_distribution(&seq[..i]).unwrap());
        }
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Vocabulary::load(dir.path().join("none.txt")).is_err());
    let v = Vocabulary::with_eos_last(["a", "</s>"]).unwrap();
    assert!(NGramModel::load(dir.path().join("none.ngram"), v).is_err());
}
