from rechunker.executors import DaskPipelineExecutor  # noqa: F401
from rechunker.executors import PythonPipelineExecutor  # noqa: F401
from rechunker.types import ParallelPipelines


def executor_for(jobs: int):
    """Serial execution for one job, dask otherwise."""
    if jobs < 1:
        raise ValueError(f"jobs must be at least 1, got {jobs}")
    if jobs == 1:
        return PythonPipelineExecutor()
    return DaskPipelineExecutor()


def compute_options(jobs: int) -> dict:
    """Keyword arguments for ``execute_plan``: a dask thread pool of ``jobs`` threads."""
    if jobs <= 1:
        return {}
    return dict(scheduler="threads", num_workers=jobs)


def run_pipelines(pipelines: ParallelPipelines, jobs: int = 1):
    executor = executor_for(jobs)
    plan = executor.pipelines_to_plan(list(pipelines))
    executor.execute_plan(plan, **compute_options(jobs))
