use fed3cr::datasets::{leave_one_out_split, HoldoutPolicy, InteractionDataset, RawInteraction};
use fed3cr::degradation::empirical_heterogeneity_probe;
use fed3cr::federation::{run_training, RunOptions};
use fed3cr::params::{HyperParams, VariantConfig};

fn rec(user: &str, item: usize, t: i64) -> RawInteraction {
    RawInteraction {
        user_id: user.into(),
        item_id: item.to_string(),
        rating: Some(1.0),
        timestamp: Some(t),
    }
}

/// Users `a` and `b` have identical histories; `c` likes other items.
fn dataset() -> InteractionDataset {
    let mut raw = Vec::new();
    for (t, item) in [0usize, 2, 4, 6, 8, 10].into_iter().enumerate() {
        raw.push(rec("a", item, t as i64));
        raw.push(rec("b", item, t as i64));
    }
    for (t, item) in [1usize, 3, 5, 7, 9, 11].into_iter().enumerate() {
        raw.push(rec("c", item, t as i64));
    }
    let ds = InteractionDataset::from_raw(&raw, 1).unwrap();
    leave_one_out_split(&ds, 0, HoldoutPolicy::LatestTimestamp).unwrap()
}

fn hp() -> HyperParams {
    HyperParams {
        rounds: 3,
        local_iters: 2,
        dim: 4,
        eval_negatives: 4,
        rbo_k: 5,
        ..Default::default()
    }
}

#[test]
fn cloned_clients_have_zero_heterogeneity() {
    let ds = dataset();
    let (a, b) = (ds.dense_user("a").unwrap(), ds.dense_user("b").unwrap());
    assert_eq!(ds.train_items(a), ds.train_items(b));
    let hp = hp();
    let v = VariantConfig::full();
    let out = run_training::<f64>(&ds, &hp, &v, &RunOptions::default()).unwrap();
    let mut clients = out.clients.clone();
    // give client b exactly client a's model so only the data could differ
    clients[b] = clients[a].clone();
    clients[b].client_id = b;
    let r = empirical_heterogeneity_probe(&ds, &clients, &out.server.consensus, &out.server.transfer, &hp, &v).unwrap();
    assert_eq!(r.gradient_difference[a][b], 0.0);
    let c = ds.dense_user("c").unwrap();
    assert!(r.gradient_difference[a][c] > 0.0);
    for i in 0..3 {
        assert_eq!(r.gradient_difference[i][i], 0.0);
        assert!((r.with_own_gradient[i][i] - r.own_gradient_norm[i]).abs() < 1e-12);
        for j in 0..3 {
            assert_eq!(r.gradient_difference[i][j], r.gradient_difference[j][i]);
        }
    }
}

#[test]
fn probe_is_reproducible() {
    let ds = dataset();
    let hp = hp();
    let v = VariantConfig::full();
    let out = run_training::<f32>(&ds, &hp, &v, &RunOptions::default()).unwrap();
    let p = || empirical_heterogeneity_probe(&ds, &out.clients, &out.server.consensus, &out.server.transfer, &hp, &v).unwrap();
    assert_eq!(p(), p());
}
