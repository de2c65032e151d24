use emovox_core::corpus::*;
use emovox_core::Tensor;
use proptest::prelude::*;

fn noiseless() -> CorpusConfig {
    CorpusConfig {
        noise_std: 0.0,
        ..CorpusConfig::default()
    }
}

fn latent_emotion(utt: &Utterance, side: &SideTable) -> usize {
    utt.emotion
        .id()
        .or_else(|| side.true_emotion(&utt.utt_id))
        .expect("every utterance has a known emotion")
}

#[test]
fn split_sizes() {
    let (corpus, side) = generate_corpus(&CorpusConfig::default()).unwrap();
    assert_eq!(corpus.len(), 1400);
    assert_eq!(corpus.train.len(), 1260);
    assert_eq!(corpus.validation.len(), 140);
    assert_eq!(side.len(), 700);
    for speaker in 0..NUM_SPEAKERS {
        let n = corpus.validation.iter().filter(|u| u.speaker_id == speaker).count();
        assert_eq!(n, 70);
    }
}

#[test]
fn durations_sum_to_frames() {
    let (corpus, _) = generate_corpus(&CorpusConfig::default()).unwrap();
    for utt in corpus.iter() {
        assert_eq!(utt.durations.iter().sum::<usize>(), utt.frames(), "{}", utt.utt_id);
        assert_eq!(utt.mel.cols(), MEL_BINS);
        utt.validate().unwrap();
    }
}

#[test]
fn same_seed_same_corpus() {
    let cfg = CorpusConfig {
        utterances_per_speaker_per_emotion: 10,
        ..CorpusConfig::default()
    };
    let (a, sa) = generate_corpus(&cfg).unwrap();
    let (b, sb) = generate_corpus(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let (c, _) = generate_corpus(&CorpusConfig { seed: cfg.seed + 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn label_policy() {
    let (corpus, side) = generate_corpus(&CorpusConfig::default()).unwrap();
    for utt in corpus.iter() {
        if utt.speaker_id == SOURCE_SPEAKER {
            assert!(utt.emotion.is_present(), "{}", utt.utt_id);
            assert_eq!(side.true_emotion(&utt.utt_id), None);
        } else {
            assert_eq!(utt.emotion, EmotionLabel::Absent, "{}", utt.utt_id);
            assert!(side.true_emotion(&utt.utt_id).is_some());
        }
    }
}

#[test]
fn target_speaker_durations_are_longer() {
    let (corpus, _) = generate_corpus(&CorpusConfig::default()).unwrap();
    let mean = |s: usize| {
        let d: Vec<usize> = corpus
            .iter()
            .filter(|u| u.speaker_id == s)
            .flat_map(|u| u.durations.iter().copied())
            .collect();
        d.iter().sum::<usize>() as f64 / d.len() as f64
    };
    let ratio = mean(TARGET_SPEAKER) / mean(SOURCE_SPEAKER);
    assert!((ratio - 1.25).abs() < 0.03, "duration ratio {ratio}");
}

#[test]
fn noiseless_oracles_are_exact() {
    let (corpus, side) = generate_corpus(&noiseless()).unwrap();
    for utt in corpus.iter() {
        assert_eq!(oracle_emotion_classify(&utt.mel).unwrap(), latent_emotion(utt, &side), "{}", utt.utt_id);
        assert_eq!(oracle_speaker_classify(&utt.mel).unwrap(), utt.speaker_id, "{}", utt.utt_id);
    }
}

#[test]
fn noisy_oracles_agree_with_generator() {
    let (corpus, side) = generate_corpus(&CorpusConfig::default()).unwrap();
    let n = corpus.len() as f64;
    let emo = corpus
        .iter()
        .filter(|u| oracle_emotion_classify(&u.mel).unwrap() == latent_emotion(u, &side))
        .count() as f64;
    let spk = corpus
        .iter()
        .filter(|u| oracle_speaker_classify(&u.mel).unwrap() == u.speaker_id)
        .count() as f64;
    assert!(emo / n >= 0.99, "emotion oracle {}", emo / n);
    assert!(spk / n >= 0.99, "speaker oracle {}", spk / n);
}

#[test]
fn fixtures_are_deterministic_and_unseen() {
    let cfg = CorpusConfig::default();
    let a = fixture_texts(&cfg, 10).unwrap();
    assert_eq!(a.len(), 70);
    assert_eq!(a, fixture_texts(&cfg, 10).unwrap());
    let (corpus, _) = generate_corpus(&cfg).unwrap();
    let seen: Vec<&Vec<usize>> = corpus.iter().map(|u| &u.phoneme_ids).collect();
    assert!(a.iter().all(|t| !seen.contains(&t)));
    for t in &a {
        assert!((cfg.min_phonemes_per_utt..=cfg.max_phonemes_per_utt).contains(&t.len()));
        assert!(t.iter().all(|&p| p < cfg.num_phonemes));
    }
}

#[test]
fn zero_frame_mel_is_unconstructible() {
    // Zero-sized tensors cannot be built, so the oracle's empty case is
    // unreachable from safe construction.
    assert!(Tensor::new(vec![0, MEL_BINS], vec![]).is_err());
}

#[test]
fn utterance_validation_reports_id() {
    let (corpus, _) = generate_corpus(&CorpusConfig {
        utterances_per_speaker_per_emotion: 1,
        ..CorpusConfig::default()
    })
    .unwrap();
    let mut utt = corpus.train[0].clone();
    utt.durations[0] += 1;
    let err = utt.validate().unwrap_err();
    assert!(err.to_string().contains(&utt.utt_id), "{err}");
}

fn emotion_bins_permuted(mel: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = mel.clone();
    let cols = mel.cols();
    for r in 0..mel.rows() {
        for (j, &p) in perm.iter().enumerate() {
            out.data_mut()[r * cols + CONTENT_BINS + j] = mel.at(r, CONTENT_BINS + p);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn speaker_oracle_ignores_emotion_bins(
        idx in 0usize..1400,
        perm in Just((0..EMOTION_BINS).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        thread_local! {
            static CORPUS: Corpus = generate_corpus(&CorpusConfig::default()).unwrap().0;
        }
        CORPUS.with(|c| {
            let utt = c.iter().nth(idx).unwrap();
            let permuted = emotion_bins_permuted(&utt.mel, &perm);
            prop_assert_eq!(
                oracle_speaker_classify(&permuted).unwrap(),
                oracle_speaker_classify(&utt.mel).unwrap()
            );
            Ok(())
        })?;
    }

    #[test]
    fn rendered_emotion_is_recovered(
        emotion in 0usize..NUM_EMOTIONS,
        speaker in 0usize..NUM_SPEAKERS,
        phonemes in prop::collection::vec(0usize..40, 1..8),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let cfg = noiseless();
        let durations = vec![3; phonemes.len()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mel = render_mel(&cfg, &phonemes, &durations, speaker, emotion, &mut rng);
        prop_assert_eq!(oracle_emotion_classify(&mel).unwrap(), emotion);
        prop_assert_eq!(oracle_speaker_classify(&mel).unwrap(), speaker);
    }
}
