//! Every distillation objective evaluated on a small batch of embeddings.

use zsdistill::losses::{
    clip_loss, contrastive_image_loss, cross_entropy_head, feature_l2, hinton_kd,
    multi_positive_loss, Temperature,
};
use zsdistill::tensor::{Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut g = Graph::<f32>::new();
    let unit = |g: &mut Graph<f32>, rows: &[[f32; 3]]| {
        let v = g.constant(
            Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
        );
        g.l2_normalize(v).unwrap()
    };
    let student = unit(&mut g, &[[1.0, 0.2, 0.0], [0.1, 1.0, 0.1], [0.0, 0.3, 1.0]]);
    let teacher = unit(&mut g, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let prompts = unit(
        &mut g,
        &[
            [1.0, 0.1, 0.1],
            [0.1, 1.0, 0.1],
            [0.1, 0.1, 1.0],
            [1.0, 1.0, 1.0],
        ],
    );
    let labels = [0, 1, 2];
    let temp = Temperature::default();
    let t = temp.bind(&mut g, false);
    println!("1/tau = {:.2}", temp.inv());

    let l2 = feature_l2(&mut g, student, teacher)?;
    let clip = clip_loss(&mut g, student, teacher, t)?;
    let mp = multi_positive_loss(&mut g, student, prompts, &labels, t)?;
    let ci = contrastive_image_loss(&mut g, student, teacher, t)?;
    let ce = cross_entropy_head(&mut g, student, &labels)?;
    let kd = hinton_kd(&mut g, student, teacher, 2.0)?;
    for (name, v) in [
        ("feature l2", l2),
        ("clip", clip),
        ("multi-positive", mp),
        ("contrastive image", ci),
        ("cross-entropy", ce),
        ("hinton kd", kd),
    ] {
        println!("{name:18} {:.4}", g.value(v).item());
    }
    Ok(())
}
