from setuptools import setup


DESCRIPTION = (
    "Mean-field particle simulator and Monte-Carlo harness for propagation "
    "of chaos with singular interaction forces."
)
LONG_DESCRIPTION = (
    "Mean-field particle simulator and Monte-Carlo harness for propagation "
    "of chaos with singular interaction forces. vlasim evolves regularized "
    "N-particle systems next to their Vlasov characteristics and measures "
    "how the deviation between both scales with N."
)


setup(
    name="vlasim",
    use_scm_version={
        "write_to": "src/vlasim/_version.py"
    },
    description=DESCRIPTION,
    long_description=LONG_DESCRIPTION,
    python_requires=">=3.8",
    packages=["vlasim"],
    package_data={"": ["LICENSE"]},
    package_dir={"vlasim": "src/vlasim"},
    setup_requires=["setuptools_scm"],
    install_requires=["numpy>=1.20", "scipy>=1.9", "jsonschema>=4.0"],
    entry_points={
        "console_scripts": [
            "vlasim = vlasim.cli:main"
        ]
    },
    include_package_data=True,
    license="GPL3",
    classifiers=[
        'License :: OSI Approved :: GNU General Public License v3 (GPLv3)',
        'Topic :: Scientific/Engineering :: Physics',
        'Topic :: Scientific/Engineering :: Mathematics',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10'
    ],
)
