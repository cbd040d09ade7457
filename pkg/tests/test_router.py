from __future__ import annotations

import numpy as np
import pytest

from conftest import make_record
from selflearn.gateway import EmbeddingVector
from selflearn.router import (
    BASE_MODEL,
    RouterModel,
    load_registry,
    route,
    save_registry,
    train_router,
)


def h_records(n=5):
    return [make_record(f"mystery topic {i} puzzle?", 0.9, index=i) for i in range(n)]


def nh_records(n=5):
    return [make_record(f"familiar ground {i} basics?", 0.1, index=100 + i) for i in range(n)]


class TestTrainRouter:
    def test_singleton_centroids_equal_embeddings(self, embedder):
        q_h = h_records(1)
        q_nh = nh_records(1)
        router = train_router(q_h, q_nh, "adapter-1", embedder)
        assert router.centroid_h == embedder.embed_one(q_h[0].text)
        assert router.centroid_nh == embedder.embed_one(q_nh[0].text)

    def test_duplicated_class_same_centroid(self, embedder):
        q_h = h_records(3)
        q_nh = nh_records(3)
        base = train_router(q_h, q_nh, "a", embedder)
        doubled = train_router(q_h * 2, q_nh, "a", embedder)
        assert np.allclose(base.centroid_h.as_array(), doubled.centroid_h.as_array())

    def test_empty_class_rejected(self, embedder):
        with pytest.raises(ValueError):
            train_router([], nh_records(1), "a", embedder)

    def test_mismatched_dimensions_rejected(self):
        with pytest.raises(ValueError):
            RouterModel(
                adapter_id="a",
                centroid_h=EmbeddingVector(values=(1.0, 0.0), dimension=2),
                centroid_nh=EmbeddingVector(values=(1.0, 0.0, 0.0), dimension=3),
            )


class TestRoute:
    def test_no_routers_is_base(self, embedder):
        assert route("anything at all", [], embedder) == BASE_MODEL

    def test_training_set_accuracy_on_separable_classes(self, embedder):
        q_h = h_records(8)
        q_nh = nh_records(8)
        router = train_router(q_h, q_nh, "adapter-x", embedder)
        for record in q_h:
            assert route(record.text, [router], embedder) == "adapter-x"
        for record in q_nh:
            assert route(record.text, [router], embedder) == BASE_MODEL

    def test_exact_tie_goes_to_base(self, embedder):
        # Identical class samples make both centroids equal, so every
        # prompt is exactly equidistant.
        same = h_records(3)
        router = RouterModel(
            adapter_id="a",
            centroid_h=train_router(same, nh_records(3), "a", embedder).centroid_h,
            centroid_nh=train_router(same, nh_records(3), "a", embedder).centroid_h,
        )
        assert route("mystery topic 0 puzzle?", [router], embedder) == BASE_MODEL

    def test_margin_suppresses_borderline(self, embedder):
        q_h = h_records(4)
        q_nh = nh_records(4)
        strict = train_router(q_h, q_nh, "a", embedder, margin=10.0)
        assert route(q_h[0].text, [strict], embedder) == BASE_MODEL

    def test_closest_adapter_wins(self, embedder):
        set_a = [make_record(f"astronomy riddle {i}?", 0.9, index=i) for i in range(4)]
        set_b = [make_record(f"cooking conundrum {i}?", 0.9, index=50 + i) for i in range(4)]
        common_nh = nh_records(4)
        router_a = train_router(set_a, common_nh, "adapter-astro", embedder)
        router_b = train_router(set_b, common_nh, "adapter-cook", embedder)
        routers = [router_a, router_b]
        assert route(set_a[0].text, routers, embedder) == "adapter-astro"
        assert route(set_b[0].text, routers, embedder) == "adapter-cook"

    def test_locality_adding_distant_router(self, embedder):
        set_a = [make_record(f"astronomy riddle {i}?", 0.9, index=i) for i in range(4)]
        set_far = [make_record(f"geology deep dive {i}?", 0.9, index=80 + i) for i in range(4)]
        common_nh = nh_records(4)
        router_a = train_router(set_a, common_nh, "adapter-astro", embedder)
        router_far = train_router(set_far, common_nh, "adapter-geo", embedder)
        for record in set_a:
            assert route(record.text, [router_a], embedder) == route(
                record.text, [router_a, router_far], embedder
            )

    def test_deterministic(self, embedder):
        router = train_router(h_records(3), nh_records(3), "a", embedder)
        decisions = {route("mystery topic 1 puzzle?", [router], embedder) for _ in range(5)}
        assert len(decisions) == 1


class TestRegistry:
    def test_round_trip(self, embedder, tmp_path):
        router = train_router(h_records(3), nh_records(3), "adapter-9", embedder, margin=0.25)
        path = tmp_path / "routers.json"
        save_registry([router], path, trained_on_run_id="run-7")
        loaded = load_registry(path)
        assert len(loaded) == 1
        assert loaded[0].adapter_id == "adapter-9"
        assert loaded[0].margin == 0.25
        assert np.allclose(loaded[0].centroid_h.as_array(), router.centroid_h.as_array())
