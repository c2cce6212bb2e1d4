from setuptools import setup, find_packages

with open("requirements.txt") as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith("#")]

setup(
    name="switching-pcem",
    version="0.1.0",
    description="Predictor-corrector Euler-Maruyama schemes for SDEs with Markovian switching",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=requirements,
    python_requires=">=3.8",
    entry_points={
        "console_scripts": [
            "switching-pcem=switching_pcem.cli:main",
        ],
    },
    package_data={
        "switching_pcem": ["configs/*.json"],
    },
)
