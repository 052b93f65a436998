import xml.etree.ElementTree as ET

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from emma import svg

NS = "{http://www.w3.org/2000/svg}"


def parse(text):
    root = ET.fromstring(text.split("\n", 2)[2])
    assert root.get("version") == "1.1"
    assert (root.get("width"), root.get("height"), root.get("viewBox")) == ("800", "500", "0 0 800 500")
    return root


def bars(root):
    return [r for r in root.iter(NS + "rect")][1:]


def test_bar_heights_proportional():
    root = parse(svg.bar_chart([1.0, 2.0, 0.0], [0, 0, 1], ("a", "b"), "t", "x label", "y label"))
    heights = [float(r.get("height")) for r in bars(root)[:3]]
    assert heights[1] == 2 * heights[0] and heights[2] == 0
    labels = [t.text for t in root.iter(NS + "text")]
    assert "x label" in labels and "y label" in labels


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=50), st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=50))
def test_histogram_counts_and_determinism(a, b):
    text = svg.histogram({"a": a, "b": b}, "title", "value", bins=10)
    assert text == svg.histogram({"a": a, "b": b}, "title", "value", bins=10)
    root = parse(text)
    assert len(bars(root)) == 2 * 10 + 2


def test_histogram_of_constant_series():
    parse(svg.histogram({"x": np.ones(5)}, "t", "v"))
