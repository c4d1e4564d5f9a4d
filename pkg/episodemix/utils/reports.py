"""Plain-text renderings of analysis results: TSV rows and Graphviz DOT."""
import json
from typing import List, Optional, Sequence

import numpy as np

from episodemix.models.models import (
    ComponentRow,
    EnrichmentTable,
    LengthRow,
    LikelihoodRatio,
    SelectionReport,
    SequenceTree,
    Stream,
    TopItems,
    Trajectory,
    VocabularySet,
)

Rows = List[List[str]]


def _num(value: Optional[float]) -> str:
    if value is None:
        return "-"
    return repr(float(value))


def enrichment_rows(table: EnrichmentTable) -> Rows:
    rows = [["stream", "state", f"p_{table.target.value}"]]
    rows += [[table.stream.value, str(s), _num(p)] for s, p in zip(table.states, table.probabilities)]
    return rows


def state_distribution_rows(matrix: np.ndarray) -> Rows:
    rows = [["top_state"] + [f"state_{k}" for k in range(matrix.shape[1])]]
    rows += [[str(z)] + [_num(v) for v in row] for z, row in enumerate(matrix)]
    return rows


def component_rows(components: Sequence[ComponentRow]) -> Rows:
    rows = [["top_state", "weight", "age_mean", "age_std", "p_sex", "p_death"]]
    rows += [[str(c.state), _num(c.weight), _num(c.age_mean), _num(c.age_std), _num(c.p_sex), _num(c.p_death)]
             for c in components]
    return rows


def length_rows(lengths: Sequence[LengthRow], count_rates: Optional[Sequence[float]] = None) -> Rows:
    rows = [["stream", "state", "length_rate", "prevalence", "p_death"]]
    rows += [[r.stream.value, str(r.state), _num(r.rate), _num(r.prevalence), _num(r.enrichment)] for r in lengths]
    if count_rates:
        rows.append([])
        rows.append(["hmm_state", "items_per_timepoint"])
        rows += [[str(s), _num(rate)] for s, rate in enumerate(count_rates)]
    return rows


def top_items_rows(tables: Sequence[TopItems]) -> Rows:
    rows = [["stream", "state", "prevalence", "rank", "item", "token", "probability"]]
    for t in tables:
        for rank, item in enumerate(t.items, start=1):
            rows.append([t.stream.value, str(t.state), _num(t.prevalence), str(rank), str(item.item),
                         item.token or "", _num(item.probability)])
    return rows


def trajectory_rows(trajectories: Sequence[Trajectory]) -> Rows:
    rows = [["stream", "state", "step", "hmm_state", "converged", "top_items"]]
    for t in trajectories:
        for step, (s, items) in enumerate(zip(t.states, t.top_items)):
            labels = ",".join(i.token or str(i.item) for i in items)
            rows.append([t.stream.value, str(t.state), str(step), str(s), str(t.converged).lower(), labels])
    return rows


def ratio_rows(stream: Stream, ratios: Sequence[LikelihoodRatio]) -> Rows:
    rows = [["stream", "hmm_state", "test", "ratio"]]
    rows += [[stream.value, str(r.state), r.test, _num(r.ratio) if r.administered else "-"] for r in ratios]
    return rows


def selection_rows(report: SelectionReport) -> Rows:
    rows = [["stage", "stream", "candidate", "bic", "chosen"]]
    for stage in report.stages:
        for n, value in zip(stage.candidates, stage.bic):
            rows.append([stage.stage, stage.stream.value if stage.stream else "-", str(n), _num(value),
                         str(n == stage.chosen).lower()])
    return rows


def tree_to_dot(tree: SequenceTree, vocabulary: Optional[VocabularySet] = None) -> str:
    """One node per prefix labelled with its termination probability; edges carry items."""
    lines = [f"digraph beds_state_{tree.state} {{",
             f'  root [label="{tree.empty_probability:.6g}"];']
    for node in tree.nodes:
        style = "" if node.reported else ", style=dashed"
        lines.append(f'  n{node.id} [label="{node.probability:.6g}"{style}];')
        parent = "root" if node.parent is None else f"n{node.parent}"
        label = node.token or (vocabulary.token(tree.stream, node.item) if vocabulary else str(node.item))
        lines.append(f'  {parent} -> n{node.id} [label={json.dumps(label, ensure_ascii=False)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
