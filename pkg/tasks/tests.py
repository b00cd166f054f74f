from pathlib import Path

from invoke import Context, task

from .utils import ESCAPED_REPO_PATH

NAMESPACE = "TRUSTPREF-TEST"
CURRENT_DIRECTORY = Path(__file__).parent.resolve()
MAIN_DIRECTORY = CURRENT_DIRECTORY.parent

# ----------------------------------------------------------------------------
# Tests tasks
# ----------------------------------------------------------------------------


@task
def tests_unit(context: Context) -> None:
    """Run the unit tests in parallel."""
    print(f" - [{NAMESPACE}] Run unit tests")
    with context.cd(ESCAPED_REPO_PATH):
        context.run("pytest -n auto --cov=trustpref tests/unit", pty=True)


@task
def tests_integration(context: Context) -> None:
    """Run the CLI tests; the statistical acceptance checks are left to tests-acceptance."""
    print(f" - [{NAMESPACE}] Run integration tests")
    with context.cd(ESCAPED_REPO_PATH):
        context.run('pytest -n auto --cov=trustpref -m "not acceptance" tests/integration', pty=True)


@task
def tests_acceptance(context: Context) -> None:
    print(f" - [{NAMESPACE}] Run desk-scale acceptance checks")
    with context.cd(ESCAPED_REPO_PATH):
        context.run("pytest -n auto -m acceptance tests/integration", pty=True)
