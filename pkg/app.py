import json
import os
import glob
import tempfile
from typing import List, Optional

import pandas as pd
import streamlit as st
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Import our custom modules
import model_zoo as zoo
import recon_engine as engine
import tensor_core as tc
from config import get_settings
from errors import ElastiqError

CUSTOM_CSS = """
<style>
    .main-header {
        font-size: 2.6rem;
        font-weight: bold;
        text-align: center;
        color: #1f77b4;
        margin-bottom: 1.5rem;
    }
    .sub-header {
        font-size: 1.4rem;
        font-weight: 600;
        color: #333;
        margin-bottom: 1rem;
    }
    .info-box {
        background-color: #f0f2f6;
        padding: 1rem;
        border-radius: 0.5rem;
        border-left: 4px solid #1f77b4;
        margin: 1rem 0;
    }
</style>
"""


def find_artifacts(directory: str, kind: Optional[str] = None) -> List[str]:
    """
    Lists artifact files under a directory, optionally filtered by kind.

    Args:
        directory: Root to search recursively
        kind: Manifest kind to keep (calibrated, calib_set, model, deployable)

    Returns:
        Sorted list of paths
    """
    paths = sorted(glob.glob(os.path.join(directory, "**", "*.qpt"), recursive=True))
    if kind is None:
        return paths
    keep = []
    for path in paths:
        try:
            header, _, _ = zoo.read_header(path)
        except ElastiqError:
            continue
        if header["manifest"].get("kind") == kind:
            keep.append(path)
    return keep


def bit_choices(calibrated: engine.CalibratedModel) -> List[str]:
    """Labels for the uniform settings a calibrated model can switch to."""
    suffix = "A16" if calibrated.config.weight_only else None
    labels = ["full precision"]
    for b in calibrated.bits:
        labels.append(f"W{b}{suffix}" if suffix else f"W{b}A{b}")
    return labels


def parse_choice(label: str) -> Optional[int]:
    if label == "full precision":
        return None
    return int(label[1:].split("A")[0])


def report_table(report: engine.EvalReport) -> pd.DataFrame:
    rows = [{"scope": "end-to-end", "mae": report.mae}]
    rows += [{"scope": f"block {i}", "mae": v} for i, v in enumerate(report.per_block_mae)]
    return pd.DataFrame(rows)


def sweep_table(calibrated: engine.CalibratedModel, data) -> pd.DataFrame:
    maes = engine.uniform_mae_table(calibrated, data)
    return pd.DataFrame([{"bits": b, "mae": v} for b, v in maes.items()])


class ElastiqDashboard:
    """Streamlit front end: load a calibrated artifact, switch bit-widths, inspect error."""

    def __init__(self):
        self.settings = get_settings()

        # Initialize session state
        if 'calibrated' not in st.session_state:
            st.session_state.calibrated = None
        if 'data' not in st.session_state:
            st.session_state.data = None
        if 'report' not in st.session_state:
            st.session_state.report = None

    def run(self):
        """Main application loop."""
        st.markdown('<h1 class="main-header">Elastic Quantization Dashboard</h1>', unsafe_allow_html=True)
        st.markdown(
            '<p style="text-align: center; color: #666;">One calibration, every bit-width: switch and compare without re-optimizing</p>',
            unsafe_allow_html=True,
        )
        self.render_sidebar()
        if st.session_state.calibrated is None:
            st.info("Load a calibrated artifact and an evaluation set from the sidebar.")
            return
        self.render_switch()
        self.render_sweep()

    def _load_uploaded(self, uploaded) -> zoo.ModelArtifact:
        with tempfile.NamedTemporaryFile(suffix=".qpt", delete=False) as tmp:
            tmp.write(uploaded.getvalue())
            path = tmp.name
        try:
            return zoo.load(path)
        finally:
            os.remove(path)

    def render_sidebar(self):
        """Renders artifact pickers."""
        with st.sidebar:
            st.markdown("## Artifacts")
            root = st.text_input("Run directory", value=self.settings.output_dir)
            calibrated_paths = find_artifacts(root, "calibrated")
            data_paths = find_artifacts(root, "calib_set")

            artifact_path = st.selectbox("Calibrated artifact", calibrated_paths) if calibrated_paths else None
            uploaded = st.file_uploader("...or upload one", type=["qpt"])
            data_path = st.selectbox("Evaluation set", data_paths) if data_paths else None

            if st.button("Load", type="primary"):
                try:
                    if uploaded is not None:
                        artifact = self._load_uploaded(uploaded)
                    elif artifact_path:
                        artifact = zoo.load(artifact_path)
                    else:
                        st.error("No calibrated artifact selected")
                        return
                    st.session_state.calibrated = engine.CalibratedModel.from_artifact(artifact)
                    if data_path:
                        st.session_state.data = zoo.load_calib(data_path).data
                    else:
                        calibrated = st.session_state.calibrated
                        st.session_state.data = zoo.gen_calib(
                            self.settings.seed + 1, 32, calibrated.model.tokens, calibrated.model.dim
                        ).data
                    st.session_state.report = None
                    st.success("Artifact loaded")
                except ElastiqError as e:
                    st.error(f"Could not load artifact: {e}")

            calibrated = st.session_state.calibrated
            if calibrated is not None:
                st.markdown("---")
                st.markdown("## Calibrated over")
                st.write(f"**Bits:** {list(calibrated.bits)}")
                st.write(f"**Tiers:** {calibrated.partition.describe()}")
                st.write(f"**Ranks:** {calibrated.config.ranks.as_tuple()} ({calibrated.config.sharing.value})")

    def render_switch(self):
        st.markdown('<h2 class="sub-header">Switch bit-width</h2>', unsafe_allow_html=True)
        calibrated = st.session_state.calibrated
        col1, col2 = st.columns([1, 2])
        with col1:
            label = st.radio("Uniform setting", bit_choices(calibrated))
            uploaded_cfg = st.file_uploader("Or a mixed-precision bit configuration", type=["json"])
        try:
            if uploaded_cfg is not None:
                cfg = engine.BitConfig.from_dict(json.loads(uploaded_cfg.getvalue()))
            else:
                cfg = engine.uniform_config(calibrated, parse_choice(label))
            steps_before = engine.OPTIMIZER_STEPS
            writes_before = tc.PARAMETER_WRITES
            deployable = engine.configure(calibrated, cfg)
            report = engine.evaluate(deployable, st.session_state.data)
        except ElastiqError as e:
            st.error(f"Configuration failed: {e}")
            return
        st.session_state.report = report
        with col2:
            c1, c2, c3 = st.columns(3)
            c1.metric("MAE vs full precision", f"{report.mae:.5f}")
            c2.metric("Optimizer steps", engine.OPTIMIZER_STEPS - steps_before)
            c3.metric("Parameter writes", tc.PARAMETER_WRITES - writes_before)
            st.dataframe(report_table(report), use_container_width=True)
            stats = pd.DataFrame({"K-S": [s for _, s in report.token_ks]})
            st.markdown("#### Token divergence (sorted)")
            st.line_chart(stats)

    def render_sweep(self):
        st.markdown('<h2 class="sub-header">All uniform settings</h2>', unsafe_allow_html=True)
        if st.button("Evaluate every bit-width"):
            with st.spinner("Evaluating..."):
                table = sweep_table(st.session_state.calibrated, st.session_state.data)
            st.bar_chart(table.set_index("bits"))
            st.dataframe(table, use_container_width=True)


def main():
    """Main function to run the Streamlit app."""
    st.set_page_config(page_title="Elastic Quantization Dashboard", layout="wide", initial_sidebar_state="expanded")
    st.markdown(CUSTOM_CSS, unsafe_allow_html=True)
    ElastiqDashboard().run()


if __name__ == "__main__":
    main()
