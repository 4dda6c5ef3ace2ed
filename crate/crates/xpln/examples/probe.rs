use xpln::data::{load_manifest, Image, PreprocessConfig, preprocess, nested_delta_n};
use xpln::model::ModelParams;
use xpln::losses::{total_loss, primary_loss, auxiliary_loss, occlusion_loss, sparsity_loss, LossWeights};
use xpln::tensor::Tensor;

fn main() {
    let model_path = std::env::args().nth(1).unwrap();
    let data_dir = std::path::PathBuf::from(std::env::args().nth(2).unwrap());
    let params = ModelParams::<f32>::load(model_path.as_ref() as &std::path::Path).unwrap();
    let (entries, _groups) = load_manifest(&data_dir.join("manifest.csv")).unwrap();
    let pre = PreprocessConfig { target: params.config().input.0, ..Default::default() };
    let w = LossWeights::default();
    for grade in 0..5usize {
        let entry = entries.iter().find(|e| e.grade == grade).unwrap();
        let img = Image::load(&data_dir.join(&entry.path)).unwrap();
        let t = preprocess(&img, &pre).unwrap().to_tensor::<f32>();
        let out = params.forward_full(&t).unwrap();
        let target = Tensor::leaf(
            &[params.config().labels],
            nested_delta_n(grade, params.config().labels).iter().map(|&v| v as f32).collect::<Vec<_>>(),
        ).unwrap();
        let lb = total_loss(
            primary_loss(&out.probs, &target).unwrap(),
            auxiliary_loss(&out.aux, &target).unwrap(),
            occlusion_loss(&out.occluded_aux),
            sparsity_loss(&out.maps).unwrap(),
            &w,
        ).unwrap();
        let vals = lb.values();
        let probs: Vec<f32> = out.probs.data().to_vec();
        let aux: Vec<f32> = out.aux.data().to_vec();
        let occ: Vec<f32> = out.occluded_aux.data().to_vec();
        let peaks: Vec<f32> = out.intensities.data().to_vec();
        println!("grade {grade}: probs {probs:?}");
        println!("  aux  {aux:?}");
        println!("  occl {occ:?}");
        println!("  pooled {peaks:?}");
        println!("  loss [prim aux occl sparse total] = {vals:?}");
    }
    // head weights
    let wraw = params.head_w_raw.data();
    println!("head w^2 rows:");
    let m1 = params.config().maps - 1;
    for n in 0..params.config().labels {
        let row: Vec<f32> = (0..m1).map(|m| wraw[n*m1+m]*wraw[n*m1+m]).collect();
        println!("  label {n}: {row:?} b {}", params.head_b.data()[n]);
    }
}
