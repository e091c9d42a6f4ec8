//! Recall@M and NDCG@M for a hand-made ranking, plus the activity-quartile
//! breakdown and bandwidth correlation used in reports.

use ndarray::array;

use vbae::eval::{bandwidth_stats, ndcg_at_m, quartile_breakdown, rank_items, recall_at_m, RankedList};

fn main() -> vbae::Result<()> {
    let scores = array![0.9, 0.1, 0.8, 0.3, 0.7, 0.2, 0.6, 0.05];
    // Item 0 was an input, so it is never recommended.
    let ranked = rank_items(scores.view(), &[0], 8);
    println!("ranking {ranked:?}");

    let list = RankedList { user: 0, ranked_items: ranked, heldout: vec![4, 5] };
    for m in [1, 2, 3, 5] {
        println!(
            "M={m}  recall {:.3}  ndcg {:.3}",
            recall_at_m(&list, m).unwrap_or(f64::NAN),
            ndcg_at_m(&list, m).unwrap_or(f64::NAN)
        );
    }

    let ndcg = [0.1, 0.2, 0.25, 0.3, 0.4, 0.45, 0.5, 0.6];
    let activity = [1, 2, 3, 5, 8, 13, 21, 34];
    println!("ndcg by activity quartile {:?}", quartile_breakdown(&ndcg, &activity)?);

    let alpha = [0.9, 0.85, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1];
    let bw = bandwidth_stats(&alpha, &activity)?;
    println!("bandwidth mean {:.3} std {:.3} pcc {:?}", bw.mean, bw.std, bw.pcc);
    Ok(())
}
