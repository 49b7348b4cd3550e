use phyloembed::acceptance::desk_decoder_options;
use phyloembed::datasyn::{gen_world, WorldConfig};
use phyloembed::dnadecode::{per_base_accuracy, train_decoder, DecoderConfig, DnaDecoder};
use phyloembed::experiments::reference_embedding;
use phyloembed::gendist::{distance_matrix, ModelTag};
use phyloembed::neuralcore::Checkpoint;

#[test]
fn twelve_pairs_are_memorized() {
    let world = gen_world(&WorldConfig::default()).unwrap();
    let dm = distance_matrix(&world.sequences, ModelTag::Tn93Mcl).unwrap();
    let emb = reference_embedding(&dm, 12).unwrap();
    let pairs: Vec<(Vec<f64>, String)> = emb
        .row_labels()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let s = world.sequences.get(l).unwrap();
            (emb.row(i).to_vec(), String::from_utf8(s.to_vec()).unwrap())
        })
        .collect();
    assert_eq!(pairs.len(), 12);
    assert!(pairs.iter().all(|(_, s)| s.len() == 157));

    let (model, history) =
        train_decoder(&pairs, DecoderConfig::default(), &desk_decoder_options()).unwrap();
    assert!(history.last().unwrap().loss < history[0].loss);
    let tf = model.teacher_forced_accuracy(&pairs).unwrap();
    assert!(tf >= 0.99, "teacher-forced accuracy {tf}");
    let mut greedy = 0.0;
    for (e, s) in &pairs {
        greedy += per_base_accuracy(&model.decode_greedy(e).unwrap(), s, None)
            .unwrap()
            .overall;
    }
    greedy /= pairs.len() as f64;
    assert!(greedy >= 0.95, "mean greedy accuracy {greedy}");

    let back = DnaDecoder::from_checkpoint(
        Checkpoint::from_text(&model.to_checkpoint().unwrap().to_text()).unwrap(),
    )
    .unwrap();
    assert_eq!(
        back.decode_greedy(&pairs[0].0).unwrap(),
        model.decode_greedy(&pairs[0].0).unwrap()
    );
}
