//! HTTP API behaviour under `/api/v1/`.

mod common;

use axum::http::{Method, StatusCode};
use common::*;
use refocus::service::Fault;
use serde_json::json;

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_refinement_cycle() {
    let fx = fixture();
    let (_, app) = fx.open();
    let (status, v) = call(&app, Method::POST, "/api/v1/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    let sid = v["session_id"].as_str().unwrap().to_string();
    let base = format!("/api/v1/sessions/{sid}");

    // Nothing to rank before a dataset and a model exist.
    let (status, _) = call(&app, Method::GET, &format!("{base}/label-stats"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, v) = call(&app, Method::POST, &format!("{base}/dataset"), Some(fx.upload_body())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["items"], 60);
    assert_eq!(v["split_sizes"], json!([36, 12, 12]));

    let (_, stats) = call(&app, Method::GET, &format!("{base}/label-stats"), None).await;
    let counts: Vec<u64> = serde_json::from_value(stats["counts"].clone()).unwrap();
    for (label, &n) in counts.iter().enumerate() {
        assert_eq!(n as usize, positives(&fx, label).len());
    }
    let (_, co) = call(&app, Method::GET, &format!("{base}/cooccurrence"), None).await;
    let m: Vec<Vec<u64>> = serde_json::from_value(co["matrix"].clone()).unwrap();
    assert_eq!(m[0][1], m[1][0]);
    assert_eq!(m[0][0], 0);

    let (status, _) = call(&app, Method::GET, &format!("{base}/ranked-images?label=0&mode=accuracy"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, v) = call(&app, Method::POST, &format!("{base}/train"), Some(json!({"request_id": "t1"}))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let (status, again) = call(&app, Method::POST, &format!("{base}/train"), Some(json!({"request_id": "t1"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, v, "replayed request id returns the original response");
    let (status, _) = call(&app, Method::POST, &format!("{base}/train"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let job = wait_job(&app, &sid).await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["progress"], 1.0);
    let (status, _) = call(&app, Method::POST, &format!("{base}/train"), None).await;
    assert_eq!(status, StatusCode::CONFLICT, "round 0 exists");

    for mode in ["accuracy", "concentration", "dependency"] {
        let (status, list) = call(&app, Method::GET, &format!("{base}/ranked-images?label=L0&mode={mode}"), None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "label names come from the label file");
        let _ = list;
        let (status, list) = call(&app, Method::GET, &format!("{base}/ranked-images?label=0&mode={mode}"), None).await;
        assert_eq!(status, StatusCode::OK, "{list}");
        let items = list.as_array().unwrap();
        assert_eq!(items.len(), 12);
        for (pos, item) in items.iter().enumerate() {
            assert_eq!(item["rank"], pos + 1);
            assert_eq!(item["annotated"], false);
        }
    }
    let (status, _) = call(&app, Method::GET, &format!("{base}/ranked-images?label=0&mode=bogus"), None).await;
    assert!(status.is_client_error());

    // Fine-tuning needs at least one annotation.
    let (status, v) = call(&app, Method::POST, &format!("{base}/finetune"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");

    let target = positives(&fx, 0)[0];
    let id = fx.image_id(target);
    let (status, h) = call(&app, Method::GET, &format!("{base}/heatmap?image={id}&label=0"), None).await;
    assert_eq!(status, StatusCode::OK, "{h}");
    assert_eq!(h["round_index"], 0);
    assert_eq!(h["rows"], 8);
    let (status, png) = raw(&app, Method::GET, &format!("{base}/heatmap/overlay?image={id}&label=0"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");

    let body = json!({"annotation": oracle_annotation(&fx, target, 0), "request_id": "a1"});
    let (status, saved) = call(&app, Method::PUT, &format!("{base}/annotations"), Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{saved}");
    assert_eq!(saved["round"], 0);
    let (_, replay) = call(&app, Method::PUT, &format!("{base}/annotations"), Some(body)).await;
    assert_eq!(replay, saved);
    let (_, list) = call(&app, Method::GET, &format!("{base}/ranked-images?label=0&mode=accuracy"), None).await;
    for item in list.as_array().unwrap() {
        assert_eq!(item["annotated"], item["image_id"] == id.as_str());
    }

    let (status, v) = call(&app, Method::POST, &format!("{base}/finetune"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    assert_eq!(wait_job(&app, &sid).await["round"], 1);

    let second = positives(&fx, 0)[1];
    let second_id = fx.image_id(second);
    let (status, accepted) = call(
        &app,
        Method::POST,
        &format!("{base}/accept-heatmap"),
        Some(json!({"image": second_id, "label": "0"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{accepted}");
    assert_eq!(accepted["accepted_from_heatmap"], true);
    assert_eq!(accepted["round"], 1);
    let (status, v) = call(&app, Method::POST, &format!("{base}/finetune"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    assert_eq!(wait_job(&app, &sid).await["round"], 2);

    let (_, history) = call(&app, Method::GET, &format!("{base}/history?label=0"), None).await;
    let rounds: Vec<u64> = history.as_array().unwrap().iter().map(|r| r["round_index"].as_u64().unwrap()).collect();
    assert_eq!(rounds, vec![0, 1, 2]);

    let (status, cmp) = call(&app, Method::GET, &format!("{base}/comparison?image={id}&label=0"), None).await;
    assert_eq!(status, StatusCode::OK, "{cmp}");
    let cmp = cmp.as_array().unwrap();
    assert_eq!(cmp.len(), 3);
    for (r, entry) in cmp.iter().enumerate() {
        assert_eq!(entry["round_index"], r);
        assert_eq!(entry["correct"], entry["predicted"] == entry["truth"]);
    }

    let (_, session) = call(&app, Method::GET, &base, None).await;
    assert_eq!(session["current_round"], 2);
    assert_eq!(session["lineage"].as_array().unwrap().len(), 3);
    assert_eq!(session["lineage"][2]["parent_round"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unknown_ids_map_to_not_found() {
    let fx = fixture();
    let (_, app) = fx.open();
    let (status, v) = call(&app, Method::GET, "/api/v1/sessions/nope/job", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
    let sid = trained_session(&fx, &app).await;
    let (status, _) = call(&app, Method::GET, &format!("/api/v1/sessions/{sid}/heatmap?image=missing.png&label=0"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, &format!("/api/v1/sessions/{sid}/heatmap?image={}&label=0&round=7", fx.image_id(0)), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, &format!("/api/v1/sessions/{sid}/history?label=9"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_annotations_are_rejected() {
    let fx = fixture();
    let (_, app) = fx.open();
    let sid = trained_session(&fx, &app).await;
    let uri = format!("/api/v1/sessions/{sid}/annotations");
    let mut a = oracle_annotation(&fx, positives(&fx, 0)[0], 0);
    a["polygons"] = json!([[[0.1, 0.1], [1.5, 0.1], [0.5, 0.5]]]);
    let (status, _) = call(&app, Method::PUT, &uri, Some(json!({"annotation": a}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    a["polygons"] = json!([[[0.1, 0.1], [0.2, 0.2]]]);
    let (status, _) = call(&app, Method::PUT, &uri, Some(json!({"annotation": a}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    a["polygons"] = json!([[[0.1, 0.1], [0.3, 0.1], [0.2, 0.3]]]);
    a["label_index"] = json!(5);
    let (status, _) = call(&app, Method::PUT, &uri, Some(json!({"annotation": a}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_survive_restart_and_failed_jobs() {
    let fx = fixture();
    let (app_state, app) = fx.open();
    let sid = trained_session(&fx, &app).await;
    let base = format!("/api/v1/sessions/{sid}");
    let (_, before) = call(&app, Method::GET, &format!("{base}/history?label=0"), None).await;
    let (_, ranked_before) = call(&app, Method::GET, &format!("{base}/ranked-images?label=0&mode=accuracy"), None).await;

    let body = json!({"annotation": oracle_annotation(&fx, positives(&fx, 0)[0], 0)});
    assert_eq!(call(&app, Method::PUT, &format!("{base}/annotations"), Some(body)).await.0, StatusCode::OK);
    for fault in [Fault::KillFinetuneAtEpoch(1), Fault::CrashBeforePublish] {
        app_state.inject_fault(fault);
        assert_eq!(call(&app, Method::POST, &format!("{base}/finetune"), None).await.0, StatusCode::ACCEPTED);
        let job = wait_job(&app, &sid).await;
        assert_eq!(job["state"], "failed", "{fault:?}: {job}");
        let (_, session) = call(&app, Method::GET, &base, None).await;
        assert_eq!(session["current_round"], 0);
    }
    assert!(fx.config.data_dir.join("sessions").join(&sid).join("checkpoints/round_0001.json").exists());
    drop(app);
    drop(app_state);

    let (_, app) = fx.open();
    let (_, session) = call(&app, Method::GET, &base, None).await;
    assert_eq!(session["current_round"], 0, "orphan checkpoint stays invisible");
    assert_eq!(session["job"]["state"], "idle");
    let (_, after) = call(&app, Method::GET, &format!("{base}/history?label=0"), None).await;
    assert_eq!(after, before);
    let (status, ranked_after) = call(&app, Method::GET, &format!("{base}/ranked-images?label=0&mode=accuracy"), None).await;
    assert_eq!(status, StatusCode::OK);
    let key = |v: &serde_json::Value| -> Vec<(String, f64, u64)> {
        v.as_array()
            .unwrap()
            .iter()
            .map(|i| (i["image_id"].as_str().unwrap().to_string(), i["score"].as_f64().unwrap(), i["rank"].as_u64().unwrap()))
            .collect()
    };
    assert_eq!(key(&ranked_after), key(&ranked_before));

    // The pending annotation survives and the retried job publishes round 1.
    assert_eq!(call(&app, Method::POST, &format!("{base}/finetune"), None).await.0, StatusCode::ACCEPTED);
    assert_eq!(wait_job(&app, &sid).await["round"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn create_session_is_idempotent() {
    let fx = fixture();
    let (_, app) = fx.open();
    let (s1, a) = call(&app, Method::POST, "/api/v1/sessions", Some(json!({"request_id": "r"}))).await;
    let (s2, b) = call(&app, Method::POST, "/api/v1/sessions", Some(json!({"request_id": "r"}))).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::OK));
    assert_eq!(a, b);
}
